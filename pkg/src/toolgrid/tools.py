"""Descriptor-driven integration of external executables.

A descriptor file names an executable, its command line per operating system,
and its typed inputs and outputs. Execution happens in a throwaway working
directory with a fixed layout:

    <workdir>/inputs/<NAME>/<filename>   one subdirectory per file input
    <workdir>/inputs.json                input name -> scalar or relative path
    <workdir>/outputs/                   empty; the tool writes here
    <workdir>/outputs.json               written by the tool: name -> scalar
                                         or relative path under outputs/

Command templates are split on whitespace first, then placeholders
(``${workdir}``, ``${in:NAME}``, ``${out:NAME}``) are substituted per token,
so substituted values are never re-split. Pre and post scripts are ordinary
subprocesses using the same template language; a non-zero exit at any stage
aborts the sequence. Nothing in the working directory is deleted afterwards.
"""

from __future__ import annotations

import json
import os
import platform
import re
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .errors import DescriptorError, ToolExecutionError
from .store import BlobStore
from .values import Datum, DatumType, convert, convertible
from .workflow import IDENT_RE, VERSION_RE, ComponentInterface, Endpoint

PLACEHOLDER_RE = re.compile(r"\$\{([^}]*)\}")
KNOWN_OS = ("linux", "windows")


def current_os() -> str:
    """The descriptor OS key for this host. Non-Windows hosts count as linux."""
    return "windows" if platform.system() == "Windows" else "linux"


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    version: str
    commands: Mapping[str, str]  # os key -> command template
    inputs: tuple[Endpoint, ...]
    outputs: tuple[Endpoint, ...]
    pre_script: Optional[str] = None
    post_script: Optional[str] = None
    documentation: Optional[str] = None

    def interface(self) -> ComponentInterface:
        return ComponentInterface(self.inputs, self.outputs)

    def input(self, name: str) -> Optional[Endpoint]:
        return next((e for e in self.inputs if e.name == name), None)

    def output(self, name: str) -> Optional[Endpoint]:
        return next((e for e in self.outputs if e.name == name), None)


@dataclass(frozen=True)
class ExecutionOutcome:
    exit_status: int
    outputs: Mapping[str, Datum]
    stdout_ref: str
    stderr_ref: str
    started_at: int
    finished_at: int
    workdir: str


def _check_placeholders(template: str, where: str,
                        inputs: set[str], outputs: set[str]) -> None:
    for match in PLACEHOLDER_RE.finditer(template):
        token = match.group(1)
        if token == "workdir":
            continue
        kind, sep, name = token.partition(":")
        if not sep or kind not in ("in", "out") or not IDENT_RE.match(name):
            raise DescriptorError("BAD_PLACEHOLDER",
                                  f"malformed placeholder ${{{token}}} in {where}")
        if kind == "in" and name not in inputs:
            raise DescriptorError("BAD_PLACEHOLDER",
                                  f"{where} references ${{in:{name}}} but no input {name!r}")
        if kind == "out" and name not in outputs:
            raise DescriptorError("BAD_PLACEHOLDER",
                                  f"{where} references ${{out:{name}}} but no output {name!r}")


def _parse_endpoints(raw, direction: str, where: str) -> tuple[Endpoint, ...]:
    if not isinstance(raw, list):
        raise DescriptorError("SYNTAX", f"{where} must be a list")
    endpoints: list[Endpoint] = []
    seen: set[str] = set()
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise DescriptorError("SYNTAX", f"{where}[{i}] must be an object")
        name = entry.get("name")
        if not isinstance(name, str):
            raise DescriptorError("SYNTAX", f"{where}[{i}] needs a name")
        if name in seen:
            raise DescriptorError("DUPLICATE_ENDPOINT",
                                  f"duplicate {direction} endpoint {name!r}")
        seen.add(name)
        try:
            dtype = DatumType.parse(entry.get("type", ""))
            handling = entry.get("handling", "queued") if direction == "input" else None
            endpoints.append(Endpoint(name, direction, dtype, handling))
        except ValueError as exc:
            raise DescriptorError("SYNTAX", f"{where}[{i}]: {exc}") from exc
        extra = set(entry) - ({"name", "type", "handling"} if direction == "input"
                              else {"name", "type"})
        if extra:
            raise DescriptorError("SYNTAX",
                                  f"{where}[{i}] has unknown keys {sorted(extra)}")
    return tuple(endpoints)


_DESCRIPTOR_KEYS = {"name", "version", "commands", "inputs", "outputs",
                    "preScript", "postScript", "documentation"}


def parse_descriptor(text: str) -> ToolDescriptor:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DescriptorError("SYNTAX", f"bad descriptor JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise DescriptorError("SYNTAX", "descriptor must be a JSON object")
    for key in doc:
        if key not in _DESCRIPTOR_KEYS:
            raise DescriptorError("UNKNOWN_FIELD", f"unknown field {key!r}")

    name = doc.get("name")
    if not isinstance(name, str) or not IDENT_RE.match(name):
        raise DescriptorError("SYNTAX", f"bad tool name {name!r}")
    version = doc.get("version")
    if not isinstance(version, str) or not VERSION_RE.match(version):
        raise DescriptorError("SYNTAX", f"bad version {version!r}")

    raw_commands = doc.get("commands", {})
    if not isinstance(raw_commands, dict):
        raise DescriptorError("SYNTAX", "commands must be an object")
    commands: dict[str, str] = {}
    for os_key, template in raw_commands.items():
        if os_key not in KNOWN_OS:
            raise DescriptorError("SYNTAX", f"unknown OS key {os_key!r}")
        if not isinstance(template, str) or not template.strip():
            raise DescriptorError("SYNTAX", f"command for {os_key} must be non-empty text")
        commands[os_key] = template
    if not commands:
        raise DescriptorError("MISSING_COMMAND", "descriptor declares no OS command")

    inputs = _parse_endpoints(doc.get("inputs", []), "input", "inputs")
    outputs = _parse_endpoints(doc.get("outputs", []), "output", "outputs")

    pre_script = doc.get("preScript")
    post_script = doc.get("postScript")
    documentation = doc.get("documentation")
    for label, value in (("preScript", pre_script), ("postScript", post_script),
                         ("documentation", documentation)):
        if value is not None and not isinstance(value, str):
            raise DescriptorError("SYNTAX", f"{label} must be text")

    in_names = {e.name for e in inputs}
    out_names = {e.name for e in outputs}
    for os_key, template in commands.items():
        _check_placeholders(template, f"commands.{os_key}", in_names, out_names)
    if pre_script:
        _check_placeholders(pre_script, "preScript", in_names, out_names)
    if post_script:
        _check_placeholders(post_script, "postScript", in_names, out_names)

    return ToolDescriptor(name, version, commands, inputs, outputs,
                          pre_script, post_script, documentation)


def descriptor_to_json(descriptor: ToolDescriptor) -> str:
    doc: dict = {
        "name": descriptor.name,
        "version": descriptor.version,
        "commands": dict(descriptor.commands),
        "inputs": [
            {"name": e.name, "type": e.datum_type.value, "handling": e.handling}
            for e in descriptor.inputs
        ],
        "outputs": [
            {"name": e.name, "type": e.datum_type.value} for e in descriptor.outputs
        ],
    }
    if descriptor.pre_script is not None:
        doc["preScript"] = descriptor.pre_script
    if descriptor.post_script is not None:
        doc["postScript"] = descriptor.post_script
    if descriptor.documentation is not None:
        doc["documentation"] = descriptor.documentation
    return json.dumps(doc, indent=2) + "\n"


def _parse_endpoint_spec(spec: str, direction: str) -> dict:
    # "x:float:queued" for inputs, "y:float" for outputs
    parts = spec.split(":")
    if direction == "input" and len(parts) == 3:
        name, type_name, handling = parts
        return {"name": name, "type": type_name, "handling": handling}
    if len(parts) == 2:
        name, type_name = parts
        entry = {"name": name, "type": type_name}
        if direction == "input":
            entry["handling"] = "queued"
        return entry
    raise DescriptorError(
        "SYNTAX",
        f"bad {direction} spec {spec!r}, expected name:type"
        + (":handling" if direction == "input" else ""))


def scaffold_descriptor(name: str, version: str, command: str,
                        input_specs: Sequence[str], output_specs: Sequence[str],
                        *, os_key: str | None = None,
                        documentation: str | None = None) -> str:
    """Build descriptor text from short answers and validate it end to end."""
    doc: dict = {
        "name": name,
        "version": version,
        "commands": {os_key or current_os(): command},
        "inputs": [_parse_endpoint_spec(s, "input") for s in input_specs],
        "outputs": [_parse_endpoint_spec(s, "output") for s in output_specs],
    }
    if documentation is not None:
        doc["documentation"] = documentation
    text = json.dumps(doc, indent=2) + "\n"
    parse_descriptor(text)  # reject bad answers before anything is written
    return text


def select_command(descriptor: ToolDescriptor, host_os: str) -> str:
    template = descriptor.commands.get(host_os)
    if template is None:
        raise DescriptorError(
            "OS_UNSUPPORTED",
            f"tool {descriptor.name}@{descriptor.version} has no {host_os} command")
    return template


def render_command(template: str, workdir: Path,
                   inputs: Mapping[str, Datum]) -> list[str]:
    """Split on whitespace, then substitute placeholders inside each token."""
    workdir = Path(workdir)

    def substitute(match: re.Match) -> str:
        token = match.group(1)
        if token == "workdir":
            return str(workdir.resolve())
        kind, _, name = token.partition(":")
        if kind == "in":
            datum = inputs.get(name)
            if datum is None:
                raise ToolExecutionError("UNRESOLVED_PLACEHOLDER",
                                         f"no input value for ${{in:{name}}}")
            if datum.type is DatumType.FILE:
                return f"inputs/{name}/{datum.value.filename}"
            return datum.literal()
        if kind == "out":
            return f"outputs/{name}"
        raise ToolExecutionError("UNRESOLVED_PLACEHOLDER",
                                 f"malformed placeholder ${{{token}}}")

    return [PLACEHOLDER_RE.sub(substitute, word) for word in template.split()]


def _now_ms() -> int:
    return int(time.time() * 1000)


def _coerce_output(name: str, declared: Endpoint, value, workdir: Path,
                   blobs: BlobStore) -> Datum:
    dtype = declared.datum_type
    if dtype is DatumType.FILE:
        if not isinstance(value, str) or not value.startswith("outputs/"):
            raise ToolExecutionError(
                "OUTPUT_TYPE_MISMATCH",
                f"output {name!r} must be a relative path under outputs/, got {value!r}")
        path = (workdir / value).resolve()
        if workdir.resolve() not in path.parents:
            raise ToolExecutionError("OUTPUT_TYPE_MISMATCH",
                                     f"output {name!r} escapes the working directory")
        if not path.is_file():
            raise ToolExecutionError("OUTPUT_MISSING",
                                     f"output {name!r} names missing file {value!r}")
        digest = blobs.put(path.read_bytes())
        return Datum.file(digest, path.name)
    try:
        if dtype is DatumType.BOOLEAN and isinstance(value, bool):
            return Datum.boolean(value)
        if dtype is DatumType.INTEGER and isinstance(value, int) and not isinstance(value, bool):
            return Datum.integer(value)
        if dtype is DatumType.FLOAT and isinstance(value, (int, float)) and not isinstance(value, bool):
            return Datum.of_float(float(value))
        if dtype is DatumType.TEXT and isinstance(value, str):
            return Datum.text(value)
    except ValueError as exc:
        raise ToolExecutionError("OUTPUT_TYPE_MISMATCH",
                                 f"output {name!r}: {exc}") from exc
    raise ToolExecutionError(
        "OUTPUT_TYPE_MISMATCH",
        f"output {name!r} declared {dtype.value}, tool wrote {value!r}")


def execute_tool(descriptor: ToolDescriptor, inputs: Mapping[str, Datum],
                 workdir_root: Path, blobs: BlobStore, *,
                 host_os: str | None = None,
                 env: Mapping[str, str] | None = None,
                 timeout: float | None = None) -> ExecutionOutcome:
    """Run one tool firing in a fresh working directory.

    Raises ToolExecutionError carrying the failed stage, exit status, and
    blob references for whatever stdout/stderr was captured before the abort.
    """
    host_os = host_os or current_os()
    main_template = select_command(descriptor, host_os)

    declared = {e.name: e for e in descriptor.inputs}
    if set(inputs) != set(declared):
        raise ToolExecutionError(
            "INPUT_MISMATCH",
            f"inputs {sorted(inputs)} do not match declared {sorted(declared)}")
    coerced: dict[str, Datum] = {}
    for name, datum in inputs.items():
        want = declared[name].datum_type
        if not convertible(datum.type, want):
            raise ToolExecutionError(
                "INPUT_MISMATCH",
                f"input {name!r} is {datum.type.value}, declared {want.value}")
        coerced[name] = convert(datum, want)

    import uuid as _uuid
    workdir = Path(workdir_root) / _uuid.uuid4().hex
    (workdir / "outputs").mkdir(parents=True)
    (workdir / "inputs").mkdir()

    inputs_doc: dict[str, object] = {}
    for name, datum in coerced.items():
        if datum.type is DatumType.FILE:
            slot = workdir / "inputs" / name
            slot.mkdir()
            (slot / datum.value.filename).write_bytes(blobs.get(datum.value.digest))
            inputs_doc[name] = f"inputs/{name}/{datum.value.filename}"
        else:
            inputs_doc[name] = datum.value
    (workdir / "inputs.json").write_text(
        json.dumps(inputs_doc, indent=2, sort_keys=True) + "\n")

    started_at = _now_ms()
    stdout_parts: list[bytes] = []
    stderr_parts: list[bytes] = []

    def flush_streams() -> tuple[str, str]:
        return blobs.put(b"".join(stdout_parts)), blobs.put(b"".join(stderr_parts))

    def fail(code: str, message: str, stage: str, status: int | None) -> ToolExecutionError:
        out_ref, err_ref = flush_streams()
        return ToolExecutionError(code, message, stage=stage, exit_status=status,
                                  stdout_ref=out_ref, stderr_ref=err_ref,
                                  started_at=started_at, finished_at=_now_ms(),
                                  workdir=str(workdir))

    run_env = dict(os.environ)
    if env:
        run_env.update(env)

    stages = [("pre", descriptor.pre_script), ("main", main_template),
              ("post", descriptor.post_script)]
    for stage, template in stages:
        if not template:
            continue
        argv = render_command(template, workdir, coerced)
        try:
            proc = subprocess.run(argv, cwd=workdir, capture_output=True,
                                  env=run_env, timeout=timeout)
        except OSError as exc:
            raise fail("SPAWN_FAILED", f"{stage} stage could not start: {exc}",
                       stage, None) from exc
        except subprocess.TimeoutExpired as exc:
            stdout_parts.append(exc.stdout or b"")
            stderr_parts.append(exc.stderr or b"")
            raise fail("TOOL_FAILED", f"{stage} stage timed out after {timeout}s",
                       stage, None) from exc
        stdout_parts.append(proc.stdout)
        stderr_parts.append(proc.stderr)
        if proc.returncode != 0:
            raise fail("TOOL_FAILED",
                       f"{stage} stage exited with status {proc.returncode}",
                       stage, proc.returncode)

    outputs: dict[str, Datum] = {}
    if descriptor.outputs:
        outputs_path = workdir / "outputs.json"
        if not outputs_path.is_file():
            raise fail("OUTPUT_MISSING", "tool wrote no outputs.json", "main", 0)
        try:
            outputs_doc = json.loads(outputs_path.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise fail("OUTPUT_MISSING", f"outputs.json is unreadable: {exc}",
                       "main", 0) from exc
        if not isinstance(outputs_doc, dict):
            raise fail("OUTPUT_MISSING", "outputs.json must be an object", "main", 0)
        for endpoint in descriptor.outputs:
            if endpoint.name not in outputs_doc:
                raise fail("OUTPUT_MISSING",
                           f"declared output {endpoint.name!r} absent from outputs.json",
                           "main", 0)
            try:
                outputs[endpoint.name] = _coerce_output(
                    endpoint.name, endpoint, outputs_doc[endpoint.name], workdir, blobs)
            except ToolExecutionError as exc:
                raise fail(exc.code, exc.message, "main", 0) from exc

    stdout_ref, stderr_ref = flush_streams()
    return ExecutionOutcome(0, outputs, stdout_ref, stderr_ref,
                            started_at, _now_ms(), str(workdir))
