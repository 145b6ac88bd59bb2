"""Folded stacks in, flamegraphs out, and why merging instances is just addition.

    python demos/01_folded_and_flamegraphs.py
"""
import json

from atys import flamegraph as fg
from atys.profile import function_totals, hotspot_distribution, parse_folded

# two instances of the same service, thread-aware folded text
node_a = """\
http-1;main;handle;parse_json 120
http-1;main;handle;db_query 300
http-2;main;handle;db_query 280
gc;main;gc_sweep 40
"""
node_b = """\
http-1;main;handle;parse_json 500
http-1;main;handle;render 150
gc;main;gc_sweep 10
"""

pa = parse_folded(node_a, thread_aware=True)
pb = parse_folded(node_b, thread_aware=True)
print("threads on node a:", pa.threads, "samples:", pa.total_samples)

# self samples belong to the leaf, inclusive counts a function once per path
for name, st in sorted(function_totals(pa).items()):
    print(f"  {name:12s} self={st.self_samples:4d} inclusive={st.inclusive_samples:4d}")

print("top-3 hotspot shares on a:", hotspot_distribution(function_totals(pa), 3).shares)

ga, gb = fg.build(pa), fg.build(pb)
merged = fg.merge(ga, gb)
print("\nglobal flamegraph (folded):")
print(fg.emit_folded(merged), end="")
assert merged.total == ga.total + gb.total

# a function that is hot on one node and cold on another
share = lambda g: 100 * g.find("main", "handle", "parse_json").total_value / g.total
print(f"\nparse_json share: a={share(ga):.2f}%  b={share(gb):.2f}%  global={share(merged):.2f}%")

# order and grouping do not matter
graphs = [ga, gb, fg.build(pa)]
flat = fg.emit_folded(fg.merge_all(graphs))
tree = fg.emit_folded(fg.hierarchical_aggregate(reversed(graphs), group_size=2))
print("flat == hierarchical:", flat == tree)
print("rounds for 1000 instances in groups of 10:", fg.group_rounds(1000, 10))

doc = json.loads(fg.emit_json(merged))
print("json root:", doc["name"], doc["value"], [c["name"] for c in doc["children"]])
