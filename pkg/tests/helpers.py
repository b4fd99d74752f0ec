"""Builders shared across the test modules.

All fixture tools are small Python scripts invoked as
``python3 <script> <workdir>`` so they run identically on any host with a
python3 on PATH. Each reads inputs.json and writes outputs.json per the
working-directory contract.
"""

import json
from pathlib import Path

PRELUDE = (
    "import json, sys\n"
    "from pathlib import Path\n"
    "wd = Path(sys.argv[1])\n"
    "doc = json.loads((wd / 'inputs.json').read_text())\n"
)

# body snippets for common fixture tools
ADD_BODY = "(wd / 'outputs.json').write_text(json.dumps({'total': doc['a'] + doc['b']}))\n"
IDENTITY_BODY = "(wd / 'outputs.json').write_text(json.dumps({'out': doc['x']}))\n"
SQUARE_GAP_BODY = (
    "(wd / 'outputs.json').write_text(json.dumps({'y': (doc['x'] - 3.0) ** 2}))\n"
)
BABYLONIAN_BODY = (
    "x = doc['x']\n"
    "(wd / 'outputs.json').write_text(json.dumps({'y': (x + 2.0 / x) / 2.0}))\n"
)
DOUBLE_BODY = "(wd / 'outputs.json').write_text(json.dumps({'out': doc['x'] * 2}))\n"


def write_tool(path: Path, body: str) -> Path:
    path.write_text(PRELUDE + body)
    return path


def script_config(script: Path, inputs: dict, outputs: dict, **extra) -> dict:
    config = {
        "command": f"python3 {script} ${{workdir}}",
        "inputs": inputs,
        "outputs": outputs,
    }
    config.update(extra)
    return config


def workflow(name: str, components: list, connections: list,
             labels: dict | None = None) -> str:
    doc = {"name": name, "components": components, "connections": connections}
    if labels is not None:
        doc["labels"] = labels
    return json.dumps(doc)


def instance(instance_id: str, component: str, config: dict | None = None,
             placement: str | None = None) -> dict:
    doc = {"id": instance_id, "component": component, "config": config or {}}
    if placement is not None:
        doc["placement"] = placement
    return doc


def edge(src: str, dst: str) -> dict:
    return {"from": src, "to": dst}


def values_log(target: Path) -> list[dict]:
    return [json.loads(line)
            for line in (target / "values.log").read_text().splitlines() if line]


def logged(target: Path, endpoint: str) -> list:
    """Values received on one writer endpoint, in arrival order."""
    return [entry["value"] for entry in values_log(target)
            if entry["endpoint"] == endpoint]
