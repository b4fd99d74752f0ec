"""The workflow controller: readiness-driven scheduling over input queues.

One engine instance owns one run. All queue and state mutation happens under
a single lock; component executions (external tools, script subprocesses)
run on a worker pool and re-enter the scheduler as completion events, so the
scheduling core never blocks on a child process. Cheap built-ins fire inline.

Firing semantics: a component is fireable when every queued input holds at
least one datum, every constant input has received a value, and no firing of
it is already in flight. Firing consumes exactly one datum per queued input;
constants are retained. Components with no queued inputs fire exactly once,
at start; loop drivers that must emit before any data exists get one
input-less bootstrap firing the same way.

A run ends COMPLETED when nothing is in flight, nothing is fireable, and all
queues are empty; leftover queued data with no possible progress is STALLED,
with diagnostics naming each starved endpoint. The first failed firing turns
the run FAILED and stops new dispatch while in-flight work drains.
"""

from __future__ import annotations

import threading
import time
import uuid
from collections import deque
from concurrent.futures import Executor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol

from .components import Behavior, FiringContext, FiringResult
from .errors import EngineError, ToolgridError
from .store import ExecutionRecord, RunStore
from .tools import ExecutionOutcome
from .values import Datum, convert
from .workflow import ComponentInstance, ComponentInterface, Diagnostic, WorkflowGraph

RUNNING = "RUNNING"
COMPLETED = "COMPLETED"
STALLED = "STALLED"
FAILED = "FAILED"
CANCELLED = "CANCELLED"


class MsClock:
    """Controller clock: UTC milliseconds, strictly increasing per call.

    Strict monotonicity makes (started_at, instance_id) a total order over
    records that reproduces dispatch order exactly.
    """

    def __init__(self):
        self._last = 0
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            t = int(time.time() * 1000)
            if t <= self._last:
                t = self._last + 1
            self._last = t
            return t


class ToolDispatch(Protocol):
    """How the engine reaches placed tools; local and remote look the same."""

    def reachable(self, node_id: str) -> bool:
        ...

    def execute(self, node_id: str, component: str,
                inputs: Mapping[str, Datum]) -> ExecutionOutcome:
        ...


@dataclass(frozen=True)
class InstancePlan:
    """One instance, resolved: its interface, executing node, and behavior.

    ``behavior`` is None for external tools, which go through ToolDispatch.
    """

    instance: ComponentInstance
    interface: ComponentInterface
    node: str
    behavior: Optional[Behavior] = None


@dataclass(frozen=True)
class _Parcel:
    """A datum in a queue plus where it came from (None when config-seeded)."""

    datum: Datum
    origin: Optional[tuple[str, int, str]]  # instance, execution_index, output


@dataclass
class _Ticket:
    instance_id: str
    execution_index: int
    consumed: dict[str, _Parcel]
    started_at: int


def new_run_id() -> str:
    return uuid.uuid4().hex[:16]


class Engine:
    def __init__(self, run_id: str, graph: WorkflowGraph, plans: list[InstancePlan],
                 store: RunStore, dispatch: ToolDispatch, executor: Executor,
                 controller_node: str, work_root: Path,
                 clock: MsClock | None = None,
                 on_event: Callable[[dict], None] | None = None):
        self.run_id = run_id
        self.graph = graph
        self.store = store
        self._plans = plans
        self._by_id = {p.instance.instance_id: p for p in plans}
        self._dispatch = dispatch
        self._executor = executor
        self._controller = controller_node
        self._work_root = Path(work_root)
        self._clock = clock or MsClock()
        self._on_event = on_event

        self._lock = threading.Lock()
        self._state = RUNNING
        self._queues: dict[tuple[str, str], deque[_Parcel]] = {}
        self._constants: dict[tuple[str, str], Optional[_Parcel]] = {}
        self._fired: dict[str, int] = {}
        self._in_flight: set[str] = set()
        self._bootstrap: set[str] = set()
        self._spent: set[str] = set()
        self._behaviors: dict[str, Behavior] = {}
        self._behavior_state: dict[str, dict] = {}
        self._seq = 0
        self._closed = False
        self._done = threading.Event()
        self._pending_events: list[dict] = []
        self.stall_diagnostics: list[Diagnostic] = []
        self.failure: Optional[dict] = None

        for plan in plans:
            inst = plan.instance.instance_id
            self._fired[inst] = 0
            queued = 0
            for ep in plan.interface.inputs:
                key = (inst, ep.name)
                if ep.handling == "queued":
                    self._queues[key] = deque()
                    queued += 1
                else:
                    self._constants[key] = None
            if plan.behavior is not None:
                self._behaviors[inst] = plan.behavior
                self._behavior_state[inst] = {}
            if queued == 0 or (plan.behavior is not None
                               and plan.behavior.starts_without_input):
                self._bootstrap.add(inst)

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> None:
        """Open records, run setup checks, seed config values, fire sources."""
        from .workflow import serialize_workflow

        for plan in self._plans:
            if not self._dispatch.reachable(plan.node):
                raise EngineError(
                    "PLACEMENT_UNREACHABLE",
                    f"instance {plan.instance.instance_id!r} is placed on "
                    f"unreachable node {plan.node!r}")
        placement = {p.instance.instance_id: p.node for p in self._plans}
        self.store.open_run(self.run_id, serialize_workflow(self.graph),
                            workflow_name=self.graph.name,
                            controller_node=self._controller,
                            placement=placement, created_at=self._clock.now())
        with self._lock:
            self._emit("run-started", workflow=self.graph.name)
            try:
                for plan in self._plans:
                    behavior = self._behaviors.get(plan.instance.instance_id)
                    if behavior is not None:
                        behavior.setup(self._context(plan.instance.instance_id, 0))
            except ToolgridError as exc:
                self.failure = {"code": exc.code, "message": exc.message}
                self._emit("run-failed", code=exc.code, message=exc.message)
                self._state = FAILED
                self._maybe_close()
                self._flush_events()
                return
            self._seed()
            self._pump()
            self._maybe_close()
        self._flush_events()

    def _seed(self) -> None:
        for plan in self._plans:
            inst = plan.instance.instance_id
            for ep in plan.interface.inputs:
                if ep.name not in plan.instance.config:
                    continue
                from .values import scalar_datum
                datum = scalar_datum(plan.instance.config[ep.name], ep.datum_type)
                parcel = _Parcel(datum, None)
                if ep.handling == "queued":
                    self._queues[(inst, ep.name)].append(parcel)
                else:
                    self._constants[(inst, ep.name)] = parcel

    def _context(self, instance_id: str, execution_index: int) -> FiringContext:
        plan = self._by_id[instance_id]
        return FiringContext(instance_id, execution_index, plan.instance.config,
                             self._behavior_state.get(instance_id, {}),
                             self.store.blobs, self._work_root)

    # -- readiness and dispatch -------------------------------------------------

    def fireable(self, instance_id: str) -> bool:
        with self._lock:
            if instance_id not in self._by_id:
                raise EngineError("UNKNOWN_INSTANCE", f"no instance {instance_id!r}")
            return self._fireable(instance_id)

    def _fireable(self, inst: str) -> bool:
        if self._state != RUNNING or inst in self._in_flight or inst in self._spent:
            return False
        plan = self._by_id[inst]
        constants_ready = all(
            self._constants[(inst, ep.name)] is not None
            for ep in plan.interface.inputs if ep.handling == "constant")
        if inst in self._bootstrap:
            return constants_ready
        queued = [ep for ep in plan.interface.inputs if ep.handling == "queued"]
        if not queued:
            return False  # fired its single shot already
        return constants_ready and all(
            self._queues[(inst, ep.name)] for ep in queued)

    def _pump(self) -> None:
        # Iterative so long inline loops (convergers, optimizers) cannot
        # recurse; deferred completions re-enter through _on_complete.
        while self._state == RUNNING:
            progressed = False
            for plan in self._plans:
                inst = plan.instance.instance_id
                if self._fireable(inst):
                    self._begin_firing(plan)
                    progressed = True
                    if self._state != RUNNING:
                        break
            if not progressed:
                break

    def _begin_firing(self, plan: InstancePlan) -> None:
        inst = plan.instance.instance_id
        index = self._fired[inst] + 1
        self._fired[inst] = index
        bootstrap = inst in self._bootstrap
        self._bootstrap.discard(inst)

        consumed: dict[str, _Parcel] = {}
        if not bootstrap:
            for ep in plan.interface.inputs:
                if ep.handling == "queued":
                    consumed[ep.name] = self._queues[(inst, ep.name)].popleft()
        for ep in plan.interface.inputs:
            if ep.handling == "constant":
                consumed[ep.name] = self._constants[(inst, ep.name)]

        has_queued = any(ep.handling == "queued" for ep in plan.interface.inputs)
        if not has_queued:
            self._spent.add(inst)

        self._in_flight.add(inst)
        ticket = _Ticket(inst, index, consumed, self._clock.now())
        self._emit("firing-started", instance=inst, execution_index=index,
                   node=plan.node)
        inputs = {name: parcel.datum for name, parcel in consumed.items()}

        behavior = self._behaviors.get(inst)
        if behavior is not None:
            try:
                result = behavior.fire(self._context(inst, index), inputs)
            except ToolgridError as exc:
                self._finish(ticket, error=exc)
                return
            if callable(result):
                self._executor.submit(self._run_async, ticket, result)
            else:
                self._finish(ticket, result=result)
        else:
            component = str(plan.instance.component)

            def call() -> FiringResult:
                outcome = self._dispatch.execute(plan.node, component, inputs)
                return FiringResult(list(outcome.outputs.items()),
                                    outcome.exit_status,
                                    outcome.stdout_ref, outcome.stderr_ref)

            self._executor.submit(self._run_async, ticket, call)

    def _run_async(self, ticket: _Ticket, call: Callable[[], FiringResult]) -> None:
        try:
            result = call()
            error = None
        except ToolgridError as exc:
            result, error = None, exc
        except Exception as exc:  # defensive: never lose a completion
            result, error = None, ToolgridError("INTERNAL", repr(exc))
        with self._lock:
            self._finish(ticket, result=result, error=error)
            self._pump()
            self._maybe_close()
        self._flush_events()

    # -- completion, routing, termination ---------------------------------------

    def _finish(self, ticket: _Ticket, result: FiringResult | None = None,
                error: ToolgridError | None = None) -> None:
        inst = ticket.instance_id
        plan = self._by_id[inst]
        self._in_flight.discard(inst)
        self._seq += 1
        finished_at = self._clock.now()

        inputs_json = {name: parcel.datum.to_json()
                       for name, parcel in ticket.consumed.items()}
        upstream = {}
        for name, parcel in ticket.consumed.items():
            if parcel.origin is None:
                upstream[name] = None
            else:
                producer, index, output = parcel.origin
                upstream[name] = {"instance": producer, "execution_index": index,
                                  "output": output}

        if error is None:
            outputs_json = {name: datum.to_json() for name, datum in result.emissions}
            record = ExecutionRecord(
                seq=self._seq, instance_id=inst,
                execution_index=ticket.execution_index,
                component=str(plan.instance.component), node=plan.node,
                status="ok", exit_status=result.exit_status,
                started_at=ticket.started_at, finished_at=finished_at,
                inputs=inputs_json, outputs=outputs_json,
                stdout=result.stdout_ref, stderr=result.stderr_ref,
                upstream=upstream)
        else:
            record = ExecutionRecord(
                seq=self._seq, instance_id=inst,
                execution_index=ticket.execution_index,
                component=str(plan.instance.component), node=plan.node,
                status="failed", exit_status=getattr(error, "exit_status", None),
                started_at=ticket.started_at, finished_at=finished_at,
                inputs=inputs_json, outputs={},
                stdout=getattr(error, "stdout_ref", None),
                stderr=getattr(error, "stderr_ref", None),
                error={"code": error.code, "message": error.message},
                upstream=upstream)
        try:
            self.store.record_execution(self.run_id, record)
        except ToolgridError:
            pass  # run force-closed during cancel grace; completion still drains

        self._emit("firing-finished", instance=inst,
                   execution_index=ticket.execution_index, status=record.status)

        if error is not None:
            if self._state == RUNNING:
                self.failure = {"code": error.code, "message": error.message,
                                "instance": inst}
                self._emit("run-failed", instance=inst, code=error.code,
                           message=error.message)
                self._state = FAILED
            return
        for output, datum in result.emissions:
            self._route(inst, ticket.execution_index, output, datum)

    def _route(self, producer: str, execution_index: int, output: str,
               datum: Datum) -> None:
        origin = (producer, execution_index, output)
        for conn in self.graph.outbound(producer, output):
            target = self._by_id.get(conn.to_instance)
            if target is None:
                continue
            ep = target.interface.input(conn.input)
            parcel = _Parcel(convert(datum, ep.datum_type), origin)
            key = (conn.to_instance, conn.input)
            if ep.handling == "queued":
                self._queues[key].append(parcel)
            else:
                self._constants[key] = parcel

    def _check_stall(self) -> str:
        leftovers = [key for key, queue in self._queues.items() if queue]
        if not leftovers:
            return COMPLETED
        starved_instances = sorted({inst for inst, _ in leftovers})
        for inst in starved_instances:
            plan = self._by_id[inst]
            for ep in plan.interface.inputs:
                key = (inst, ep.name)
                if ep.handling == "queued" and not self._queues[key]:
                    self.stall_diagnostics.append(Diagnostic(
                        "error", "STARVED_INPUT", f"components.{inst}.{ep.name}",
                        f"input {ep.name!r} of {inst!r} never received data while "
                        f"other inputs did"))
                    self._emit("stall", instance=inst, endpoint=ep.name)
                if ep.handling == "constant" and self._constants[key] is None:
                    self.stall_diagnostics.append(Diagnostic(
                        "error", "STARVED_INPUT", f"components.{inst}.{ep.name}",
                        f"constant input {ep.name!r} of {inst!r} never received "
                        f"a value"))
                    self._emit("stall", instance=inst, endpoint=ep.name)
        if not self.stall_diagnostics:
            for inst, name in sorted(leftovers):
                self.stall_diagnostics.append(Diagnostic(
                    "error", "UNCONSUMED_INPUT", f"components.{inst}.{name}",
                    f"data left on {inst}.{name} with no possible firing"))
        return STALLED

    def _maybe_close(self) -> None:
        if self._closed or self._in_flight:
            return
        if self._state == RUNNING:
            if any(self._fireable(p.instance.instance_id) for p in self._plans):
                return
            self._state = self._check_stall()
        self._closed = True
        self._emit("run-finished", state=self._state)
        try:
            self.store.close_run(self.run_id, self._state,
                                 closed_at=self._clock.now())
        except ToolgridError:
            pass  # already force-closed by cancel
        self._done.set()

    # -- public surface ----------------------------------------------------------

    def run_state(self) -> str:
        with self._lock:
            return self._state

    def wait(self, timeout: float | None = None) -> str:
        self._done.wait(timeout)
        return self.run_state()

    def cancel(self, grace: float = 5.0) -> None:
        with self._lock:
            if self._state != RUNNING:
                raise EngineError("ALREADY_TERMINAL",
                                  f"run is already {self._state}")
            self._state = CANCELLED
            self._emit("run-cancelled")
            self._maybe_close()
        self._flush_events()
        if not self._done.wait(grace):
            # Abandon stragglers: close records now; late completions no-op.
            with self._lock:
                if not self._closed:
                    self._closed = True
                    self._emit("run-finished", state=self._state)
                    try:
                        self.store.close_run(self.run_id, self._state,
                                             closed_at=self._clock.now())
                    except ToolgridError:
                        pass
                    self._done.set()
            self._flush_events()

    # -- events -------------------------------------------------------------------

    def _emit(self, event: str, **fields) -> None:
        at = self._clock.now()
        try:
            self.store.append_event(self.run_id, at, event, **fields)
        except ToolgridError:
            pass
        doc = {"run_id": self.run_id, "at": at, "event": event}
        doc.update(fields)
        self._pending_events.append(doc)

    def _flush_events(self) -> None:
        if self._on_event is None:
            self._pending_events.clear()
            return
        while True:
            with self._lock:
                if not self._pending_events:
                    return
                batch = self._pending_events[:]
                self._pending_events.clear()
            for doc in batch:
                try:
                    self._on_event(doc)
                except Exception:
                    pass  # a dead watcher must not hurt the run
