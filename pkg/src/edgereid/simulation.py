"""Deterministic single-process simulation of edge nodes and one edge server.

Every camera is an edge node.  Time advances one frame per tick; within a
tick the order is fixed:

1. nodes apply MatchReplies that have arrived,
2. nodes process their frame and queue messages on their uplink,
3. the server moves due uplink messages into its per-node buffers and
   runs round-robin steps, sending replies on the downlinks,
4. the ownership invariants are checked.

After the last frame, messages still in flight are delivered in arrival
order until every channel and server buffer is empty.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .core import SystemParams, make_detection
from .embedsim import Scenario, build_model, check_thresholds, load_scenario, sample_embedding
from .metrics import Measurements, TrackSet, ae_coverage, ae_mark, efficiency, id_measures, read_measurements
from .pipeline import LocalDatabase, apply_match_reply, process_frame
from .predictor import ConstantVelocityPredictor, RecurrentPredictor
from .protocol import Channel, MatchReply, Query, Release, UpdateFeature, decode, schema_violations
from .server import GlobalDatabase, RoundRobin, round_robin_step

log = logging.getLogger(__name__)

SELF_TEST_LATENCY = 10**6

_MESSAGE_NAMES = {Query: "query", UpdateFeature: "update_feature", Release: "release", MatchReply: "match_reply"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: Path | Scenario
    seed: int
    params: SystemParams = field(default_factory=SystemParams)
    capacity: int | None = None
    latency: int | None = None  # overrides the scenario's network latency
    jitter: int | None = None
    server_steps_per_tick: int | None = None  # default: one per node
    channel_capacity: int | None = None
    predictor: str = "constant-velocity"  # or a path to recurrent weights
    out_dir: Path | None = None
    formats: tuple[str, ...] = ("json",)
    measurements: Path | None = None
    audit_privacy: bool = False
    self_test_latency: bool = False


_PARAM_KEYS = set(SystemParams.__dataclass_fields__)


def parse_run_config(text: str, base_dir: Path | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments, blank lines ignored)."""
    base_dir = base_dir or Path(".")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, value = line.partition("=")
        else:
            key, _, value = line.partition(" ")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        values[key] = value

    known = _PARAM_KEYS | {
        "scenario", "seed", "capacity", "latency", "jitter", "server_steps_per_tick", "channel_capacity",
        "predictor", "out", "format", "measurements", "audit_privacy", "self_test_latency",
    }
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "scenario" not in values:
        raise ConfigError("config must name a scenario")
    if "seed" not in values:
        raise ConfigError("config must set a seed")

    def path(key: str) -> Path | None:
        return (base_dir / values[key]) if key in values else None

    def opt_int(key: str) -> int | None:
        return int(values[key]) if key in values else None

    def flag(key: str) -> bool:
        return values.get(key, "false").lower() in ("1", "true", "yes", "on")

    try:
        params = SystemParams.from_mapping({k: v for k, v in values.items() if k in _PARAM_KEYS})
        predictor = values.get("predictor", "constant-velocity")
        if predictor != "constant-velocity":
            predictor = str(base_dir / predictor)
        return RunConfig(
            scenario=path("scenario"),
            seed=int(values["seed"]),
            params=params,
            capacity=opt_int("capacity"),
            latency=opt_int("latency"),
            jitter=opt_int("jitter"),
            server_steps_per_tick=opt_int("server_steps_per_tick"),
            channel_capacity=opt_int("channel_capacity"),
            predictor=predictor,
            out_dir=path("out"),
            formats=tuple(f.strip() for f in values.get("format", "json").split(",") if f.strip()),
            measurements=path("measurements"),
            audit_privacy=flag("audit_privacy"),
            self_test_latency=flag("self_test_latency"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_run_config(path.read_text(encoding="utf-8"), path.parent)


@dataclass
class RunReport:
    cameras: list[int]
    num_frames: int
    num_identities: int
    per_camera: dict[int, dict[str, Any]]
    multi: dict[str, Any]
    messages: dict[str, int]
    ownership_violations: int
    id_switches: int
    global_identities: int
    server: dict[str, int]
    channels: dict[str, int]
    ae: dict[str, Any] | None = None
    privacy_audit: dict[str, Any] | None = None
    latency_self_test: dict[str, Any] | None = None

    @property
    def invariant_violations(self) -> int:
        n = self.ownership_violations
        if self.privacy_audit is not None:
            n += self.privacy_audit["violations"]
        if self.latency_self_test is not None and not self.latency_self_test["passed"]:
            n += 1
        if self.server.get("replies_sent", 0) != self.server.get("matches", 0):
            n += 1
        return n

    def to_dict(self) -> dict[str, Any]:
        return {
            "cameras": self.cameras,
            "num_frames": self.num_frames,
            "num_identities": self.num_identities,
            "per_camera": {str(k): v for k, v in sorted(self.per_camera.items())},
            "multi": self.multi,
            "messages": self.messages,
            "ownership_violations": self.ownership_violations,
            "id_switches": self.id_switches,
            "global_identities": self.global_identities,
            "server": self.server,
            "channels": self.channels,
            "ae": self.ae,
            "privacy_audit": self.privacy_audit,
            "latency_self_test": self.latency_self_test,
            "invariant_violations": self.invariant_violations,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunReport:
        kwargs = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        kwargs["per_camera"] = {int(k): v for k, v in d["per_camera"].items()}
        return cls(**kwargs)


@dataclass
class SimulationTrace:
    report: RunReport
    truth: TrackSet
    hypothesis_local: TrackSet
    hypothesis_global: TrackSet
    # (camera, frame) -> sorted (truth identity, local ID) pairs
    assignments: dict[tuple[int, int], list[tuple[int, int]]]
    # (camera, local ID) -> global ID as resolved by the server
    resolutions: dict[tuple[int, int], int]
    reply_ticks: list[tuple[int, int, int]]  # (tick, camera, local ID)
    transcripts: dict[str, list[bytes]]


class Simulation:
    def __init__(self, scenario: Scenario, config: RunConfig) -> None:
        self.scenario = scenario
        self.config = config
        self.params = config.params
        self.cameras = sorted(scenario.cameras)
        self.model = build_model(scenario.embedding, scenario.identities)
        if config.predictor == "constant-velocity":
            self.predictor = ConstantVelocityPredictor()
        else:
            self.predictor = RecurrentPredictor.from_file(config.predictor)
        latency = scenario.network.latency if config.latency is None else config.latency
        jitter = scenario.network.jitter if config.jitter is None else config.jitter
        record = config.audit_privacy
        self.uplinks = {
            c: Channel(latency, jitter, seed=config.seed * 7919 + 2 * k, capacity=config.channel_capacity, record=record)
            for k, c in enumerate(self.cameras)
        }
        self.downlinks = {
            c: Channel(latency, jitter, seed=config.seed * 7919 + 2 * k + 1, capacity=config.channel_capacity, record=record)
            for k, c in enumerate(self.cameras)
        }
        self.dbs = {c: LocalDatabase() for c in self.cameras}
        self.server = GlobalDatabase(config.capacity, config.params.beta_euc, self.cameras)
        self.rr = RoundRobin(self.server)
        self.steps_per_tick = config.server_steps_per_tick or len(self.cameras)

        self.truth = TrackSet()
        self.hyp_local = TrackSet()
        self._hyp_rows: list[tuple[int, int, int, Any]] = []  # camera, frame, local ID, bbox
        self.assignments: dict[tuple[int, int], list[tuple[int, int]]] = {}
        self.resolutions: dict[tuple[int, int], int] = {}
        self.reply_ticks: list[tuple[int, int, int]] = []
        self.messages: Counter[str] = Counter({name: 0 for name in _MESSAGE_NAMES.values()})
        self.ownership_violations = 0
        self.id_switches = 0
        self.late_replies = 0
        self._last_label: dict[tuple[int, int], int] = {}
        self._draw_base = len(self.cameras)

    def _link_down(self, camera: int, tick: int) -> bool:
        return any(c == camera and s <= tick < e for c, s, e in self.scenario.network.outages)

    def _apply_replies(self, now: int) -> None:
        for cam in self.cameras:
            for msg in self.downlinks[cam].deliver_due(now):
                self.reply_ticks.append((now, cam, msg.temp_id))
                if not apply_match_reply(self.dbs[cam], msg.temp_id, msg.global_id):
                    self.late_replies += 1

    def _run_node(self, k: int, cam: int, tick: int) -> None:
        params = self.params
        observations = self.scenario.frame(cam, tick)
        detections, owners = [], []
        for obs in observations:
            self.truth.add(obs.identity, cam, tick, obs.truth_box(params.theta_conf))
            if not obs.visible or not any(kp.confidence >= params.theta_conf for kp in obs.keypoints):
                continue
            feature = sample_embedding(self.model, obs.identity, tick * self._draw_base + k)
            detections.append(make_detection(obs.keypoints, feature, params.theta_conf, tick, cam))
            owners.append(obs.identity)
        result = process_frame(detections, self.dbs[cam], self.predictor, params, node_id=cam)
        pairs = []
        for d_idx, local_id in sorted(result.labels.items()):
            ident = owners[d_idx]
            pairs.append((ident, local_id))
            self._hyp_rows.append((cam, tick, local_id, detections[d_idx].bbox))
            last = self._last_label.get((cam, ident))
            if last is not None and last != local_id:
                self.id_switches += 1
            self._last_label[(cam, ident)] = local_id
        self.assignments[(cam, tick)] = sorted(pairs)
        uplink = self.uplinks[cam]
        for msg in result.outbound:
            uplink.send(msg, tick)
            self.messages[_MESSAGE_NAMES[type(msg)]] += 1

    def _serve(self, now: int, steps: int | None) -> None:
        for cam in self.cameras:
            for msg in self.uplinks[cam].deliver_due(now):
                self.rr.enqueue(cam, msg)
        done = 0
        while self.rr.pending() and (steps is None or done < steps):
            for node, reply in round_robin_step(self.rr):
                self.downlinks[node].send(reply, now)
                self.messages["match_reply"] += 1
            self.resolutions.update(self.server.aliases)
            done += 1

    def _check_ownership(self) -> None:
        holders: dict[int, list[int]] = defaultdict(list)
        for cam in self.cameras:
            for entry in self.dbs[cam].entries.values():
                if entry.global_id is not None:
                    holders[entry.global_id].append(cam)
        for gid, cams in holders.items():
            if len(cams) > 1:
                self.ownership_violations += 1
                log.error("global ID %s held by nodes %s", gid, cams)
            ge = self.server.entries.get(gid)
            if ge is not None and ge.owner not in cams:
                self.ownership_violations += 1
                log.error("global ID %s held by node %s but owned by %s", gid, cams, ge.owner)

    def run(self) -> SimulationTrace:
        ticks = self.scenario.num_ticks
        for tick in range(ticks):
            for cam in self.cameras:
                self.uplinks[cam].down = self._link_down(cam, tick)
            self._apply_replies(tick)
            for k, cam in enumerate(self.cameras):
                if tick < self.scenario.cameras[cam]:
                    self._run_node(k, cam, tick)
            self._serve(tick, self.steps_per_tick)
            self._check_ownership()
        self._drain(ticks)
        return self._finish()

    def _drain(self, now: int) -> None:
        """Deliver everything still in flight once the scenario has ended."""
        for ch in self.uplinks.values():
            ch.down = False
        while True:
            due = [t for ch in (*self.uplinks.values(), *self.downlinks.values()) if (t := ch.next_due()) is not None]
            if not due and not self.rr.pending():
                break
            # step to the earliest pending delivery so arrival order is preserved
            now = max(now, min(due)) if due else now
            self._apply_replies(now)
            self._serve(now, None)
            self._check_ownership()

    def _finish(self) -> SimulationTrace:
        hyp_global = TrackSet()
        synthetic = 1 << 40
        unresolved: dict[tuple[int, int], int] = {}
        for cam, frame, local_id, box in self._hyp_rows:
            self.hyp_local.add(local_id, cam, frame, box)
            gid = self.resolutions.get((cam, local_id))
            if gid is None:
                gid = unresolved.setdefault((cam, local_id), synthetic + len(unresolved))
            hyp_global.add(gid, cam, frame, box)

        iou_thr = 0.3
        per_camera = {
            cam: id_measures(self.truth.restrict(cam), self.hyp_local.restrict(cam), iou_thr).as_dict()
            for cam in self.cameras
        }
        multi = id_measures(self.truth, hyp_global, iou_thr).as_dict()
        stats = vars(self.server.stats).copy()
        channels = {
            "uplink_dropped": sum(ch.dropped for ch in self.uplinks.values()),
            "downlink_dropped": sum(ch.dropped for ch in self.downlinks.values()),
            "late_replies": self.late_replies,
        }
        report = RunReport(
            cameras=self.cameras,
            num_frames=self.scenario.num_ticks,
            num_identities=len(self.scenario.identities),
            per_camera=per_camera,
            multi=multi,
            messages=dict(sorted(self.messages.items())),
            ownership_violations=self.ownership_violations,
            id_switches=self.id_switches,
            global_identities=self.server.next_global_id - 1,
            server=stats,
            channels=channels,
        )
        transcripts = {}
        if self.config.audit_privacy:
            for cam in self.cameras:
                transcripts[f"uplink-{cam}"] = list(self.uplinks[cam].transcript or [])
                transcripts[f"downlink-{cam}"] = list(self.downlinks[cam].transcript or [])
            report.privacy_audit = audit_transcripts(transcripts)
        return SimulationTrace(
            report, self.truth, self.hyp_local, hyp_global, self.assignments, self.resolutions,
            self.reply_ticks, transcripts,
        )


def audit_transcripts(transcripts: dict[str, list[bytes]]) -> dict[str, Any]:
    """Decode every recorded frame and check it against the four-variant schema."""
    variants: Counter[str] = Counter()
    violations = 0
    n_bytes = 0
    for frames in transcripts.values():
        for frame in frames:
            n_bytes += len(frame)
            try:
                msg = decode(frame)
            except ValueError:
                violations += 1
                continue
            if schema_violations(msg):
                violations += 1
            variants[_MESSAGE_NAMES[type(msg)]] += 1
    return {
        "frames": sum(variants.values()) + violations,
        "bytes": n_bytes,
        "variants": {name: variants.get(name, 0) for name in sorted(_MESSAGE_NAMES.values())},
        "violations": violations,
    }


def simulate(scenario: Scenario, config: RunConfig) -> SimulationTrace:
    return Simulation(scenario, config).run()


def latency_self_test(scenario: Scenario, config: RunConfig) -> dict[str, Any]:
    """Compare per-frame local assignments at zero and very high channel latency."""
    base = replace(config, latency=0, jitter=0, audit_privacy=False, self_test_latency=False)
    slow = replace(base, latency=SELF_TEST_LATENCY)
    fast_trace = simulate(scenario, base)
    slow_trace = simulate(scenario, slow)
    mismatched = [k for k in fast_trace.assignments if fast_trace.assignments[k] != slow_trace.assignments.get(k)]
    return {
        "passed": not mismatched and fast_trace.assignments.keys() == slow_trace.assignments.keys(),
        "frames_compared": len(fast_trace.assignments),
        "mismatched_frames": len(mismatched),
        "latencies": [0, SELF_TEST_LATENCY],
    }


def ae_block(measurements: Measurements, accuracy_default: float) -> dict[str, Any]:
    if measurements.fps is None or measurements.watts is None:
        raise ConfigError("measurements need both fps and watts")
    accuracy = measurements.accuracy if measurements.accuracy is not None else accuracy_default
    eff = efficiency(measurements.fps, measurements.watts)
    block: dict[str, Any] = {
        "fps": measurements.fps,
        "watts": measurements.watts,
        "accuracy": accuracy,
        "efficiency": eff,
        "mark": ae_mark(accuracy, eff),
        "coverage": None,
    }
    if measurements.components:
        block["coverage"] = ae_coverage(measurements.components)
        block["coverage_components"] = [c.name for c in measurements.components]
        block["coverage_note"] = "equal-angle radar polygon area over the unit polygon area"
    return block


def run_sim(config: RunConfig) -> RunReport:
    if isinstance(config.scenario, Scenario):
        scenario = config.scenario
        check_thresholds(scenario, config.params)
    else:
        scenario = load_scenario(config.scenario, config.params)
    trace = simulate(scenario, config)
    report = trace.report
    if config.self_test_latency:
        report.latency_self_test = latency_self_test(scenario, config)
    if config.measurements is not None:
        report.ae = ae_block(read_measurements(config.measurements), report.multi["idf1"])
    return report
