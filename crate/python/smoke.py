"""Smoke test for the coopdiag extension.

Build and run:
    cargo build -p coopdiag-py --release --features extension-module
    cp target/release/libcoopdiag_py.so python/coopdiag.so
    python3 python/smoke.py
"""
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import coopdiag as cd  # noqa: E402

s = cd.Scenario.bundled()
print(s)
assert s.episodes == 120
assert [f[2] for f in s.failures] == [30, 60, 90]

assert cd.tukey_fences([8, 9, 10, 10, 11, 12]) is not None
assert cd.external_verification_score([(0.9, 1.0), (0.3, 0.5)]) == 0.7
assert cd.external_verification_score([]) == 0.0

c = cd.Constraint("((rt <= 100) && (cost < 10))")
assert c.eval({"rt": 50.0, "cost": 3.0})
assert not c.eval({"rt": 150.0, "cost": 3.0})

try:
    cd.Scenario.from_json("{}")
    raise SystemExit("expected ValueError")
except ValueError:
    pass
assert cd.Scenario.issues("{}")

runs = {st: cd.run_simulation(s, st, 1) for st in cd.STRATEGIES}
for st, r in runs.items():
    assert len(r) == 120, st
    assert r.audit() == [], (st, r.audit()[:3])
    print(f"{st:<12} cost={r.accumulated_cost:8.2f} violations={r.violation_episodes:3d} "
          f"final={r.final_active_failures}")
assert runs["cooperative"].final_active_failures == []
assert runs["remedial"].accumulated_cost >= 1.5 * runs["passive"].accumulated_cost
assert runs["cooperative"].csv() == cd.run_simulation(s, "cooperative", 1).csv()

rows = cd.compare(s, ["passive", "cooperative"], [1, 2], episodes=40)
assert [r["strategy"] for r in rows] == ["passive", "cooperative"]
print("ok")
