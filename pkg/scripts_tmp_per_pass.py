import sys
import time
import faulthandler

from posched.testkit import GenSpec, gen_instance
from posched import expand_demand
from posched.vhe import run_iteration, vhe_by_name

spec = GenSpec(seed=2, n_work_orders=600, routing_length=(56, 56),
               n_capability_classes=8, stations_per_class=11,
               duration_range=(15, 60), horizon_days=90, due_tightness=2.4,
               quantity_range=(1, 2), per_quantity_share=0.2)
factory, demand = gen_instance(spec)
graph = expand_demand(demand, factory)
print("tasks", len(graph.tasks), flush=True)
name = sys.argv[1]
faulthandler.dump_traceback_later(120, repeat=True)
t0 = time.perf_counter()
rec = run_iteration(vhe_by_name(name), demand, factory, graph)
print(f"{name}: {time.perf_counter()-t0:.0f}s unsched={len(rec.unscheduled)}", flush=True)
