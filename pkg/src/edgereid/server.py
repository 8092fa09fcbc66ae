"""Edge-server global database with node ownership and round-robin message handling."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DimensionMismatch, FeatureVector, as_feature, l2_distance
from .protocol import PROVISIONAL_FLAG, MatchReply, Message, Query, Release, UpdateFeature, is_provisional

log = logging.getLogger(__name__)


class UnknownNode(KeyError):
    pass


class UnknownId(KeyError):
    pass


class NotOwner(PermissionError):
    pass


class CapacityDeadlock(RuntimeError):
    pass


@dataclass
class GlobalEntry:
    global_id: int
    feature: FeatureVector
    owner: int | None
    last_update: int


@dataclass
class ServerStats:
    matches: int = 0
    created: int = 0
    updates: int = 0
    releases: int = 0
    not_owner: int = 0
    unknown_id: int = 0
    malformed: int = 0
    capacity_deadlocks: int = 0
    evicted: int = 0
    replies_sent: int = 0


class GlobalDatabase:
    """Global identities, which node (if any) owns each, and node-local aliases.

    A node that has not yet learned the global ID of one of its objects
    addresses it by ``PROVISIONAL_FLAG | local_id``; ``aliases`` resolves
    those references.  An alias lives until the owning node releases it.
    """

    def __init__(self, capacity: int | None = None, beta_euc: float = 2.0, nodes: Sequence[int] = ()) -> None:
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.beta_euc = beta_euc
        self.entries: dict[int, GlobalEntry] = {}
        self.next_global_id = 1
        self.nodes: list[int] = []
        self.aliases: dict[tuple[int, int], int] = {}
        self.clock = 0
        self.stats = ServerStats()
        for node in nodes:
            self.register_node(node)

    def register_node(self, node: int) -> None:
        if node not in self.nodes:
            self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.entries)

    def owner_of(self, global_id: int) -> int | None:
        return self.entries[global_id].owner

    def _tick(self) -> int:
        self.clock += 1
        return self.clock

    def _check_node(self, node: int) -> None:
        if node not in self.nodes:
            raise UnknownNode(node)

    def _resolve(self, node: int, ref: int) -> GlobalEntry:
        if is_provisional(ref):
            gid = self.aliases.get((node, ref & ~PROVISIONAL_FLAG))
            if gid is None:
                raise UnknownId(ref)
        else:
            gid = ref
        entry = self.entries.get(gid)
        if entry is None:
            raise UnknownId(ref)
        return entry

    def handle_query(self, node: int, temp_id: int, feature: FeatureVector) -> MatchReply | None:
        """Match against unowned entries; reply only when one is within ``beta_euc``."""
        self._check_node(node)
        feature = as_feature(feature)
        best: GlobalEntry | None = None
        best_dist = np.inf
        for gid in sorted(self.entries):
            entry = self.entries[gid]
            if entry.owner is not None:
                continue
            try:
                dist = l2_distance(feature, entry.feature)
            except DimensionMismatch:
                continue
            if dist < best_dist:
                best, best_dist = entry, dist
        now = self._tick()
        if best is not None and best_dist < self.beta_euc:
            best.owner = node
            best.last_update = now
            self.aliases[(node, temp_id)] = best.global_id
            self.stats.matches += 1
            return MatchReply(temp_id, best.global_id)

        gid = self.next_global_id
        self.next_global_id += 1
        self.entries[gid] = GlobalEntry(gid, feature, node, now)
        self.aliases[(node, temp_id)] = gid
        self.stats.created += 1
        if self.capacity is not None and len(self.entries) > self.capacity:
            try:
                self.evict_lru()
            except CapacityDeadlock as exc:
                self.stats.capacity_deadlocks += 1
                log.warning("%s", exc)
        return None

    def handle_update(self, node: int, global_id: int, feature: FeatureVector) -> None:
        self._check_node(node)
        entry = self._resolve(node, global_id)
        if entry.owner != node:
            raise NotOwner(f"node {node} updated global ID {entry.global_id} owned by {entry.owner}")
        entry.feature = as_feature(feature)
        entry.last_update = self._tick()
        self.stats.updates += 1

    def handle_release(self, node: int, global_id: int) -> None:
        self._check_node(node)
        entry = self._resolve(node, global_id)
        if entry.owner != node:
            raise NotOwner(f"node {node} released global ID {entry.global_id} owned by {entry.owner}")
        entry.owner = None
        entry.last_update = self._tick()
        for key in [k for k, v in self.aliases.items() if k[0] == node and v == entry.global_id]:
            del self.aliases[key]
        self.stats.releases += 1

    def evict_lru(self) -> list[int]:
        """Drop the least recently touched unowned entries until within capacity."""
        if self.capacity is None or len(self.entries) <= self.capacity:
            return []
        excess = len(self.entries) - self.capacity
        unowned = sorted((e for e in self.entries.values() if e.owner is None), key=lambda e: (e.last_update, e.global_id))
        removed = [e.global_id for e in unowned[:excess]]
        for gid in removed:
            del self.entries[gid]
        self.stats.evicted += len(removed)
        if len(removed) < excess:
            raise CapacityDeadlock(
                f"{len(self.entries)} entries over capacity {self.capacity} and none left unowned"
            )
        return removed

    def dispatch(self, node: int, msg: Message) -> MatchReply | None:
        """Apply one inbound message; protocol-level failures are counted, not raised."""
        try:
            if isinstance(msg, Query):
                if msg.node_id != node:
                    raise UnknownNode(msg.node_id)
                reply = self.handle_query(node, msg.temp_id, msg.feature)
                if reply is not None:
                    self.stats.replies_sent += 1
                return reply
            if isinstance(msg, UpdateFeature) and msg.node_id == node:
                self.handle_update(node, msg.global_id, msg.feature)
            elif isinstance(msg, Release) and msg.node_id == node:
                self.handle_release(node, msg.global_id)
            else:
                self.stats.malformed += 1
        except NotOwner as exc:
            self.stats.not_owner += 1
            log.info("rejected: %s", exc)
        except UnknownId as exc:
            self.stats.unknown_id += 1
            log.info("unknown global ID %s from node %s", exc, node)
        except (UnknownNode, ValueError) as exc:
            self.stats.malformed += 1
            log.info("malformed message from node %s: %s", node, exc)
        return None


@dataclass
class RoundRobin:
    """Cyclic service over per-node FIFO inbound buffers."""

    db: GlobalDatabase
    buffers: dict[int, deque] = field(default_factory=dict)
    last_served: int | None = None
    served: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for node in self.db.nodes:
            self.buffers.setdefault(node, deque())
            self.served.setdefault(node, 0)

    def enqueue(self, node: int, msg: Message) -> None:
        self.buffers[node].append(msg)

    def pending(self) -> int:
        return sum(len(b) for b in self.buffers.values())

    def order(self) -> list[int]:
        nodes = self.db.nodes
        if self.last_served is None or self.last_served not in nodes:
            return list(nodes)
        start = nodes.index(self.last_served) + 1
        return nodes[start:] + nodes[:start]

    def step(self) -> list[tuple[int, MatchReply]]:
        """Serve at most one message from each node, starting after the last one served."""
        return round_robin_step(self)


def round_robin_step(rr: RoundRobin) -> list[tuple[int, MatchReply]]:
    replies = []
    for node in rr.order():
        buf = rr.buffers.get(node)
        if not buf:
            continue
        msg = buf.popleft()
        rr.last_served = node
        rr.served[node] = rr.served.get(node, 0) + 1
        reply = rr.db.dispatch(node, msg)
        if reply is not None:
            replies.append((node, reply))
    return replies
