import json
import time

import pytest

from toolgrid.errors import EngineError
from toolgrid.store import sha256_hex

from helpers import (
    BABYLONIAN_BODY,
    DOUBLE_BODY,
    PRELUDE,
    edge,
    instance,
    logged,
    script_config,
    workflow,
)


def write_tool(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(PRELUDE + body)
    return path


def linear_workflow(tmp_path, target):
    double = write_tool(tmp_path, "double.py", DOUBLE_BODY)
    return workflow(
        "linear",
        [instance("src", "input-provider@1", {"values": {"v": 21}}),
         instance("calc", "script@1",
                  script_config(double, {"x": "integer"}, {"out": "integer"})),
         instance("sink", "output-writer@1",
                  {"target": str(target), "inputs": {"r": "integer"}})],
        [edge("src.v", "calc.x"), edge("calc.out", "sink.r")])


def test_linear_pipeline_completes(node, tmp_path):
    target = tmp_path / "out"
    events = []
    engine = node.start_run(linear_workflow(tmp_path, target),
                            on_event=events.append)
    assert engine.wait(60) == "COMPLETED"
    assert logged(target, "r") == [42]

    records = node.store.query_run(engine.run_id)
    assert [(r.instance_id, r.execution_index) for r in records] == [
        ("src", 1), ("calc", 1), ("sink", 1)]
    assert all(r.status == "ok" for r in records)
    assert all(r.node == node.node_id for r in records)
    assert all(r.started_at <= r.finished_at for r in records)

    calc = records[1]
    assert calc.component == "script@1"
    assert calc.inputs == {"x": {"type": "integer", "value": 21}}
    assert calc.outputs == {"out": {"type": "integer", "value": 42}}
    assert calc.upstream == {
        "x": {"instance": "src", "execution_index": 1, "output": "v"}}
    # subprocess streams are captured even when empty
    assert calc.stdout is not None and node.blobs.has(calc.stdout)

    kinds = [e["event"] for e in events]
    assert kinds[0] == "run-started"
    assert kinds[-1] == "run-finished"
    assert kinds.count("firing-started") == 3
    assert kinds.count("firing-finished") == 3
    assert events[-1]["state"] == "COMPLETED"

    meta = node.store.run_meta(engine.run_id)
    assert meta["state"] == "COMPLETED"
    assert meta["controller_node"] == node.node_id
    assert meta["placement"] == {"src": node.node_id, "calc": node.node_id,
                                 "sink": node.node_id}


def test_run_ids_are_unique_and_settable(node, tmp_path):
    target = tmp_path / "out"
    text = linear_workflow(tmp_path, target)
    engine = node.start_run(text, run_id="custom-run-7")
    assert engine.run_id == "custom-run-7"
    assert engine.wait(60) == "COMPLETED"
    with pytest.raises(Exception):
        node.start_run(text, run_id="custom-run-7")  # ids are write-once


def test_validation_failure_carries_diagnostics(node):
    text = workflow("broken", [instance("w", "output-writer@1",
                                        {"target": "/tmp/x", "inputs": {"r": "float"}})],
                    [])
    with pytest.raises(EngineError) as err:
        node.start_run(text)
    assert err.value.code == "VALIDATION_FAILED"
    codes = [d.code for d in err.value.diagnostics]
    assert codes == ["INPUT_UNCONNECTED"]


def test_source_components_fire_exactly_once(node, tmp_path):
    target = tmp_path / "out"
    text = workflow(
        "fanout",
        [instance("src", "input-provider@1", {"values": {"a": 1, "b": 2}}),
         instance("sink", "output-writer@1",
                  {"target": str(target), "inputs": {"x": "integer", "y": "integer"}})],
        [edge("src.a", "sink.x"), edge("src.b", "sink.y")])
    engine = node.start_run(text)
    assert engine.wait(60) == "COMPLETED"
    records = node.store.query_run(engine.run_id)
    assert [(r.instance_id, r.execution_index) for r in records] == [
        ("src", 1), ("sink", 1)]


def test_loop_with_config_seed_and_constants(node, tmp_path):
    # heron iteration: step.x is seeded by config and then fed by the loop
    # edge; the constant input k arrives once and is reused by every firing
    step_tool = tmp_path / "step.py"
    step_tool.write_text(PRELUDE + (
        "x, k = doc['x'], doc['k']\n"
        "(wd / 'outputs.json').write_text(json.dumps({'y': (x + k / x) / 2.0}))\n"))
    target = tmp_path / "out"
    text = workflow(
        "sqrt-k",
        [instance("kprov", "input-provider@1", {"values": {"k": 2.0}}),
         instance("step", "script@1",
                  script_config(step_tool,
                                {"x": "float", "k": "float:constant"},
                                {"y": "float"}, x=1.0)),
         instance("conv", "converger@1", {"eps_abs": 1e-6, "max_iterations": 50}),
         instance("sink", "output-writer@1",
                  {"target": str(target), "inputs": {"r": "float", "ok": "boolean"}})],
        [edge("kprov.k", "step.k"),
         edge("step.y", "conv.x"),
         edge("conv.loop", "step.x"),
         edge("conv.converged", "sink.r"),
         edge("conv.done", "sink.ok")])
    engine = node.start_run(text)
    assert engine.wait(60) == "COMPLETED"
    result = logged(target, "r")
    assert len(result) == 1 and abs(result[0] - 2 ** 0.5) <= 1e-6
    assert logged(target, "ok") == [True]

    steps = node.store.query_run(engine.run_id, instance_id="step")
    assert [r.execution_index for r in steps] == list(range(1, len(steps) + 1))
    assert len(steps) >= 4
    # the seeded firing has no upstream producer for x
    assert steps[0].upstream["x"] is None
    assert steps[1].upstream["x"] == {
        "instance": "conv", "execution_index": 1, "output": "loop"}
    # the constant was delivered once but appears in every firing's inputs
    assert all(r.inputs["k"] == {"type": "float", "value": 2.0} for r in steps)
    assert all(r.upstream["k"] == {"instance": "kprov", "execution_index": 1,
                                   "output": "k"} for r in steps)


def test_optimizer_bootstrap_firing(node, tmp_path):
    gap = write_tool(tmp_path, "gap.py",
                     "(wd / 'outputs.json').write_text("
                     "json.dumps({'y': (doc['x'] - 3.0) ** 2}))\n")
    target = tmp_path / "out"
    text = workflow(
        "tune",
        [instance("driver", "optimizer@1",
                  {"strategy": "coordinate_descent",
                   "variables": [{"name": "x", "lower": 0.0, "upper": 10.0,
                                  "initial_step": 1.0}],
                   "tol": 1e-3, "max_evals": 200}),
         instance("f", "script@1",
                  script_config(gap, {"x": "float"}, {"y": "float"})),
         instance("sink", "output-writer@1",
                  {"target": str(target), "inputs": {"best": "text"}})],
        [edge("driver.x", "f.x"),
         edge("f.y", "driver.objective"),
         edge("driver.optimum", "sink.best")])
    engine = node.start_run(text)
    assert engine.wait(120) == "COMPLETED"

    driver_records = node.store.query_run(engine.run_id, instance_id="driver")
    first = driver_records[0]
    assert first.execution_index == 1
    assert first.inputs == {}  # loop drivers start without input
    report = json.loads(logged(target, "best")[0])
    assert report == {"evaluations": 24, "point": {"x": 3.0}, "value": 0.0}
    assert len(node.store.query_run(engine.run_id, instance_id="f")) == 24


def test_stall_names_the_starved_endpoint(node, tmp_path):
    join = write_tool(tmp_path, "join.py",
                      "(wd / 'outputs.json').write_text(json.dumps({}))\n")
    text = workflow(
        "starved",
        [instance("src", "input-provider@1", {"values": {"v": 1.0, "w": 20.0}}),
         instance("gate", "switch@1", {"condition": "< 10"}),
         instance("join", "script@1",
                  script_config(join, {"a": "float", "b": "float"}, {}))],
        [edge("src.v", "join.a"),
         edge("src.w", "gate.value"),
         edge("gate.true", "join.b")])  # 20 exits on gate.false: b starves
    engine = node.start_run(text)
    assert engine.wait(60) == "STALLED"
    diags = engine.stall_diagnostics
    assert [d.code for d in diags] == ["STARVED_INPUT"]
    assert diags[0].location == "components.join.b"
    assert "'b'" in diags[0].message
    assert node.store.run_state(engine.run_id) == "STALLED"
    events = [e["event"] for e in node.store.events(engine.run_id)]
    assert "stall" in events
    # the starved join never fired
    assert node.store.query_run(engine.run_id, instance_id="join") == []


def test_tool_failure_fails_the_run(node, tmp_path):
    bad = tmp_path / "bad.py"
    bad.write_text("import sys\nsys.stderr.write('no license\\n')\nsys.exit(7)\n")
    target = tmp_path / "out"
    text = workflow(
        "doomed",
        [instance("src", "input-provider@1", {"values": {"v": 1.0}}),
         instance("calc", "script@1",
                  script_config(bad, {"x": "float"}, {"y": "float"})),
         instance("sink", "output-writer@1",
                  {"target": str(target), "inputs": {"r": "float"}})],
        [edge("src.v", "calc.x"), edge("calc.y", "sink.r")])
    engine = node.start_run(text)
    assert engine.wait(60) == "FAILED"
    assert engine.failure["code"] == "TOOL_FAILED"
    assert engine.failure["instance"] == "calc"

    failed = node.store.query_run(engine.run_id, instance_id="calc")[0]
    assert failed.status == "failed"
    assert failed.exit_status == 7
    assert node.blobs.get(failed.stderr).endswith(b"no license\n")
    assert node.store.query_run(engine.run_id, instance_id="sink") == []
    assert not (target / "values.log").exists()


def test_cancel_run(node, tmp_path):
    slow = tmp_path / "slow.py"
    slow.write_text("import time\ntime.sleep(120)\n")
    text = workflow(
        "sleepy",
        [instance("src", "input-provider@1", {"values": {"v": 1.0}}),
         instance("calc", "script@1",
                  script_config(slow, {"x": "float"}, {}))],
        [edge("src.v", "calc.x")])
    events = []
    engine = node.start_run(text, on_event=events.append)
    deadline = time.monotonic() + 20
    while time.monotonic() < deadline:
        if any(e["event"] == "firing-started" and e.get("instance") == "calc"
               for e in list(events)):
            break
        time.sleep(0.02)
    engine.cancel(grace=0.5)
    assert engine.wait(30) == "CANCELLED"
    assert node.store.run_state(engine.run_id) == "CANCELLED"


def test_repeat_runs_are_bit_identical(node, tmp_path):
    emitter = tmp_path / "emit.py"
    emitter.write_text(PRELUDE + (
        "(wd / 'outputs' / 'table.bin').write_bytes(b'col\\n%.3f\\n' % doc['x'])\n"
        "(wd / 'outputs.json').write_text(json.dumps(\n"
        "    {'y': doc['x'] * 2.0, 'table': 'outputs/table.bin'}))\n"))

    def run(tag):
        target = tmp_path / f"out-{tag}"
        text = workflow(
            "repeat",
            [instance("src", "input-provider@1", {"values": {"v": 1.25}}),
             instance("calc", "script@1",
                      script_config(emitter, {"x": "float"},
                                    {"y": "float", "table": "file"})),
             instance("sink", "output-writer@1",
                      {"target": str(target),
                       "inputs": {"r": "float", "t": "file"}})],
            [edge("src.v", "calc.x"), edge("calc.y", "sink.r"),
             edge("calc.table", "sink.t")])
        engine = node.start_run(text)
        assert engine.wait(60) == "COMPLETED"
        return engine.run_id, target

    run_a, target_a = run("a")
    run_b, target_b = run("b")

    def output_digests(run_id):
        return [(r.instance_id, r.execution_index,
                 sha256_hex(json.dumps(r.outputs, sort_keys=True).encode()))
                for r in node.store.query_run(run_id)]

    assert output_digests(run_a) == output_digests(run_b)
    assert ((target_a / "values.log").read_bytes()
            == (target_b / "values.log").read_bytes())
    assert ((target_a / "sink-t-1-table.bin").read_bytes()
            == (target_b / "sink-t-1-table.bin").read_bytes())
    # no record references a blob the store does not hold
    assert node.store.missing_blobs(run_a) == []
    assert node.store.missing_blobs(run_b) == []
