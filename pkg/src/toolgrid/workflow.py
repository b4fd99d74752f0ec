"""Workflow graph model: parsing, validation, and placement planning.

Workflow files are declarative JSON documents:

    {
      "name": "airplane-eval",
      "components": [
        {"id": "sim", "component": "scenario-sim@1.0",
         "config": {"scenario": 2.0}, "placement": "auto"}
      ],
      "connections": [
        {"from": "sim.result", "to": "summary.perf"}
      ],
      "labels": ["any annotation"]
    }

Connection endpoints are written ``"<instance>.<endpoint>"``. Labels are inert
annotations and never influence execution. Cycles are legal; loop drivers
terminate them.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Protocol

from .errors import PlacementError, WorkflowParseError
from .values import DatumType, convertible, infer_scalar_type

IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_-]*$")
VERSION_RE = re.compile(r"^[A-Za-z0-9._-]+$")
# Component names gained through a relay carry the remote party's id as a
# "<party>::" prefix so two organizations' tools can never collide.
COMPONENT_NAME_RE = re.compile(
    r"^(?:[A-Za-z0-9_-]+::)?[A-Za-z_][A-Za-z0-9_-]*$")


@dataclass(frozen=True)
class ComponentRef:
    """A component identity: (name, version), rendered ``name@version``."""

    name: str
    version: str

    def __str__(self) -> str:
        return f"{self.name}@{self.version}"

    @classmethod
    def parse(cls, text: str) -> "ComponentRef":
        name, sep, version = text.partition("@")
        if not sep or not COMPONENT_NAME_RE.match(name) or not VERSION_RE.match(version):
            raise ValueError(f"bad component reference {text!r}, expected name@version")
        return cls(name, version)


@dataclass(frozen=True)
class Endpoint:
    """A named, typed port. ``handling`` applies to inputs only."""

    name: str
    direction: str  # "input" | "output"
    datum_type: DatumType
    handling: Optional[str] = None  # "queued" | "constant" for inputs

    def __post_init__(self):
        if not IDENT_RE.match(self.name):
            raise ValueError(f"bad endpoint name {self.name!r}")
        if self.direction not in ("input", "output"):
            raise ValueError(f"bad direction {self.direction!r}")
        if self.direction == "output":
            if self.handling is not None:
                raise ValueError("outputs have no handling attribute")
        elif self.handling not in ("queued", "constant"):
            raise ValueError(f"bad input handling {self.handling!r}")


@dataclass(frozen=True)
class ComponentInterface:
    """The typed surface of a component: what validation and routing need."""

    inputs: tuple[Endpoint, ...]
    outputs: tuple[Endpoint, ...]

    def input(self, name: str) -> Optional[Endpoint]:
        return next((e for e in self.inputs if e.name == name), None)

    def output(self, name: str) -> Optional[Endpoint]:
        return next((e for e in self.outputs if e.name == name), None)


class ComponentCatalog(Protocol):
    """Resolves component references to their typed interfaces."""

    def resolve(self, ref: ComponentRef, config: Mapping) -> Optional[ComponentInterface]:
        ...


@dataclass(frozen=True)
class ComponentInstance:
    instance_id: str
    component: ComponentRef
    config: Mapping = field(default_factory=dict)
    placement: str = "auto"


@dataclass(frozen=True)
class Connection:
    from_instance: str
    output: str
    to_instance: str
    input: str

    def __str__(self) -> str:
        return f"{self.from_instance}.{self.output} -> {self.to_instance}.{self.input}"


@dataclass(frozen=True)
class WorkflowGraph:
    name: str
    components: tuple[ComponentInstance, ...]
    connections: tuple[Connection, ...]
    labels: tuple[str, ...] = ()

    def instance(self, instance_id: str) -> Optional[ComponentInstance]:
        return next((c for c in self.components if c.instance_id == instance_id), None)

    def inbound(self, instance_id: str) -> list[Connection]:
        return [c for c in self.connections if c.to_instance == instance_id]

    def outbound(self, instance_id: str, output: str) -> list[Connection]:
        return [c for c in self.connections
                if c.from_instance == instance_id and c.output == output]


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity} {self.code} at {self.location}: {self.message}"


def errors_only(diagnostics: Iterable[Diagnostic]) -> list[Diagnostic]:
    return [d for d in diagnostics if d.severity == "error"]


@dataclass(frozen=True)
class PlacementPlan:
    assignments: Mapping[str, str]  # instance_id -> node id

    def node_for(self, instance_id: str) -> str:
        return self.assignments[instance_id]

    def nodes(self) -> set[str]:
        return set(self.assignments.values())


# --- parsing -----------------------------------------------------------------

_TOP_KEYS = {"name", "components", "connections", "labels"}
_COMPONENT_KEYS = {"id", "component", "config", "placement"}
_CONNECTION_KEYS = {"from", "to"}


def _split_endpoint_ref(text, where: str) -> tuple[str, str]:
    if not isinstance(text, str) or text.count(".") != 1:
        raise WorkflowParseError(
            "SYNTAX", f"expected \"<instance>.<endpoint>\", got {text!r}", location=where)
    instance, endpoint = text.split(".")
    if not IDENT_RE.match(instance) or not IDENT_RE.match(endpoint):
        raise WorkflowParseError(
            "SYNTAX", f"bad endpoint reference {text!r}", location=where)
    return instance, endpoint


def parse_workflow(text: str) -> WorkflowGraph:
    """Parse a workflow document, preserving declaration order.

    Raises WorkflowParseError with codes SYNTAX (with line/column for JSON
    errors), DUPLICATE_INSTANCE_ID, or UNKNOWN_FIELD.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WorkflowParseError("SYNTAX", exc.msg, line=exc.lineno, column=exc.colno) from exc
    if not isinstance(doc, dict):
        raise WorkflowParseError("SYNTAX", "workflow document must be a JSON object")
    for key in doc:
        if key not in _TOP_KEYS:
            raise WorkflowParseError("UNKNOWN_FIELD", f"unknown field {key!r}", location=key)

    name = doc.get("name", "")
    if not isinstance(name, str):
        raise WorkflowParseError("SYNTAX", "name must be text", location="name")

    components: list[ComponentInstance] = []
    seen: set[str] = set()
    raw_components = doc.get("components", [])
    if not isinstance(raw_components, list):
        raise WorkflowParseError("SYNTAX", "components must be a list", location="components")
    for i, entry in enumerate(raw_components):
        where = f"components[{i}]"
        if not isinstance(entry, dict):
            raise WorkflowParseError("SYNTAX", "component entry must be an object", location=where)
        for key in entry:
            if key not in _COMPONENT_KEYS:
                raise WorkflowParseError(
                    "UNKNOWN_FIELD", f"unknown field {key!r}", location=f"{where}.{key}")
        instance_id = entry.get("id")
        if not isinstance(instance_id, str) or not IDENT_RE.match(instance_id):
            raise WorkflowParseError("SYNTAX", f"bad instance id {instance_id!r}", location=where)
        if instance_id in seen:
            raise WorkflowParseError(
                "DUPLICATE_INSTANCE_ID", f"duplicate instance id {instance_id!r}",
                location=where)
        seen.add(instance_id)
        try:
            ref = ComponentRef.parse(entry.get("component", ""))
        except ValueError as exc:
            raise WorkflowParseError("SYNTAX", str(exc), location=f"{where}.component") from exc
        config = entry.get("config", {})
        if not isinstance(config, dict):
            raise WorkflowParseError("SYNTAX", "config must be an object", location=f"{where}.config")
        placement = entry.get("placement", "auto")
        if not isinstance(placement, str) or not placement:
            raise WorkflowParseError("SYNTAX", "placement must be a node id or \"auto\"",
                                     location=f"{where}.placement")
        components.append(ComponentInstance(instance_id, ref, config, placement))

    connections: list[Connection] = []
    raw_connections = doc.get("connections", [])
    if not isinstance(raw_connections, list):
        raise WorkflowParseError("SYNTAX", "connections must be a list", location="connections")
    for i, entry in enumerate(raw_connections):
        where = f"connections[{i}]"
        if not isinstance(entry, dict):
            raise WorkflowParseError("SYNTAX", "connection entry must be an object", location=where)
        for key in entry:
            if key not in _CONNECTION_KEYS:
                raise WorkflowParseError(
                    "UNKNOWN_FIELD", f"unknown field {key!r}", location=f"{where}.{key}")
        if "from" not in entry or "to" not in entry:
            raise WorkflowParseError("SYNTAX", "connection needs from and to", location=where)
        src_inst, src_port = _split_endpoint_ref(entry["from"], f"{where}.from")
        dst_inst, dst_port = _split_endpoint_ref(entry["to"], f"{where}.to")
        connections.append(Connection(src_inst, src_port, dst_inst, dst_port))

    raw_labels = doc.get("labels", [])
    if not isinstance(raw_labels, list) or any(not isinstance(x, str) for x in raw_labels):
        raise WorkflowParseError("SYNTAX", "labels must be a list of text", location="labels")

    return WorkflowGraph(name, tuple(components), tuple(connections), tuple(raw_labels))


def serialize_workflow(graph: WorkflowGraph) -> str:
    """Canonical text form; parse_workflow(serialize_workflow(g)) == g."""
    doc = {
        "name": graph.name,
        "components": [
            {
                "id": c.instance_id,
                "component": str(c.component),
                "config": dict(c.config),
                "placement": c.placement,
            }
            for c in graph.components
        ],
        "connections": [
            {"from": f"{c.from_instance}.{c.output}", "to": f"{c.to_instance}.{c.input}"}
            for c in graph.connections
        ],
        "labels": list(graph.labels),
    }
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


# --- validation ---------------------------------------------------------------

def validate_graph(graph: WorkflowGraph, catalog: ComponentCatalog) -> list[Diagnostic]:
    """Check a parsed graph against available component interfaces.

    Returns an empty list iff the graph is executable. Never raises; all
    problems come back as diagnostics.
    """
    out: list[Diagnostic] = []
    interfaces: dict[str, ComponentInterface] = {}

    for comp in graph.components:
        try:
            iface = catalog.resolve(comp.component, comp.config)
        except Exception as exc:  # bad built-in config surfaces here
            code = getattr(exc, "code", "BAD_CONFIG")
            out.append(Diagnostic("error", code, f"components.{comp.instance_id}", str(exc)))
            continue
        if iface is None:
            out.append(Diagnostic(
                "error", "UNKNOWN_COMPONENT", f"components.{comp.instance_id}",
                f"component {comp.component} is not available"))
            continue
        interfaces[comp.instance_id] = iface

    incoming: dict[tuple[str, str], int] = {}
    for i, conn in enumerate(graph.connections):
        where = f"connections[{i}]"
        src = graph.instance(conn.from_instance)
        dst = graph.instance(conn.to_instance)
        if src is None:
            out.append(Diagnostic("error", "UNKNOWN_INSTANCE", where,
                                  f"no instance {conn.from_instance!r}"))
        if dst is None:
            out.append(Diagnostic("error", "UNKNOWN_INSTANCE", where,
                                  f"no instance {conn.to_instance!r}"))
        if src is None or dst is None:
            continue
        src_iface = interfaces.get(conn.from_instance)
        dst_iface = interfaces.get(conn.to_instance)
        out_ep = src_iface.output(conn.output) if src_iface else None
        in_ep = dst_iface.input(conn.input) if dst_iface else None
        if src_iface and out_ep is None:
            out.append(Diagnostic("error", "UNKNOWN_ENDPOINT", where,
                                  f"{conn.from_instance} has no output {conn.output!r}"))
        if dst_iface and in_ep is None:
            out.append(Diagnostic("error", "UNKNOWN_ENDPOINT", where,
                                  f"{conn.to_instance} has no input {conn.input!r}"))
        if out_ep and in_ep and not convertible(out_ep.datum_type, in_ep.datum_type):
            out.append(Diagnostic(
                "error", "TYPE_MISMATCH", where,
                f"{out_ep.datum_type.value} output cannot feed "
                f"{in_ep.datum_type.value} input"))
        key = (conn.to_instance, conn.input)
        incoming[key] = incoming.get(key, 0) + 1
        if incoming[key] == 2:
            out.append(Diagnostic(
                "error", "DUPLICATE_INPUT_CONNECTION", where,
                f"input {conn.to_instance}.{conn.input} has more than one incoming connection"))

    for comp in graph.components:
        iface = interfaces.get(comp.instance_id)
        if iface is None:
            continue
        for ep in iface.inputs:
            connected = (comp.instance_id, ep.name) in incoming
            seeded = ep.name in comp.config
            where = f"components.{comp.instance_id}.{ep.name}"
            if seeded:
                seed = comp.config[ep.name]
                try:
                    seed_type = infer_scalar_type(seed)
                except ValueError:
                    out.append(Diagnostic("error", "TYPE_MISMATCH", where,
                                          f"config seed {seed!r} is not a scalar"))
                    continue
                if not convertible(seed_type, ep.datum_type):
                    out.append(Diagnostic(
                        "error", "TYPE_MISMATCH", where,
                        f"config seed {seed!r} does not fit {ep.datum_type.value}"))
            if ep.handling == "queued" and not connected and not seeded:
                out.append(Diagnostic(
                    "error", "INPUT_UNCONNECTED", where,
                    f"queued input {ep.name!r} is neither connected nor seeded by config"))
            if ep.handling == "constant" and not connected and not seeded:
                out.append(Diagnostic(
                    "warning", "UNSEEDED_CONSTANT", where,
                    f"constant input {ep.name!r} never receives a value"))
    return out


# --- placement ----------------------------------------------------------------

def plan_placement(
    graph: WorkflowGraph,
    providers: Mapping[ComponentRef, set[str]],
    overrides: Mapping[str, str] | None = None,
) -> PlacementPlan:
    """Assign each instance to a publishing node.

    Per instance: explicit override wins (and must actually publish the
    component); a graph-level placement pin is treated the same way; otherwise
    the single provider, or the lexicographically smallest node id when
    several publish it.
    """
    overrides = overrides or {}
    assignments: dict[str, str] = {}
    for comp in graph.components:
        nodes = providers.get(comp.component, set())
        pinned = overrides.get(comp.instance_id)
        if pinned is None and comp.placement != "auto":
            pinned = comp.placement
        if pinned is not None:
            if pinned not in nodes:
                raise PlacementError(
                    "OVERRIDE_INVALID",
                    f"node {pinned!r} does not publish {comp.component} "
                    f"(instance {comp.instance_id!r})",
                    instance_id=comp.instance_id)
            assignments[comp.instance_id] = pinned
            continue
        if not nodes:
            raise PlacementError(
                "NO_PROVIDER",
                f"no node publishes {comp.component} (instance {comp.instance_id!r})",
                instance_id=comp.instance_id)
        assignments[comp.instance_id] = min(nodes)
    return PlacementPlan(assignments)
