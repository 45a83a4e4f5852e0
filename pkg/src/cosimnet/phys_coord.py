"""Physics-side coordinator: owns a world simulator, steps it exactly one
window per sync round, and ships the compressed channel snapshot on each
END message.

The snapshot attached to END(t) reflects agent state at t + W (the window
just simulated); the network side applies it to its next window.  This
one-window latency is inherent to the handshake and documented here once.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from enum import Enum

from . import wire
from .physics import ChannelFidelity, PhysicsSim
from .sync import PeerLink, Role, RunStats, SyncError, SyncPeer
from .wire import MsgType, PhysicsUpdate


class PhysicsBackendKind(Enum):
    REFERENCE = "reference"
    SOCKET = "socket"


@dataclass(frozen=True)
class PhysicsBackend:
    """Where the world runs: in-process reference, or an external simulator
    reachable at a TCP address."""

    kind: PhysicsBackendKind
    address: tuple[str, int] | None = None

    def __post_init__(self):
        if self.kind is PhysicsBackendKind.SOCKET:
            if self.address is None:
                raise ValueError("socket backend needs a (host, port) address")
            host, port = self.address
            if not isinstance(port, int) or not 0 < port < 65536:
                raise ValueError(f"invalid port {port}")
            object.__setattr__(self, "address", (str(host), port))
        elif self.address is not None:
            raise ValueError("address only applies to the socket backend")

    @classmethod
    def reference(cls) -> "PhysicsBackend":
        return cls(PhysicsBackendKind.REFERENCE)

    @classmethod
    def socket(cls, host: str, port: int) -> "PhysicsBackend":
        return cls(PhysicsBackendKind.SOCKET, (host, port))


def substep_schedule(window_ns: int, substeps_per_window: int) -> list[int]:
    """Equal substep durations summing exactly to one window."""
    if substeps_per_window < 1:
        raise ValueError(f"substeps_per_window must be >= 1, got {substeps_per_window}")
    if window_ns <= 0:
        raise ValueError(f"window must be > 0 ns, got {window_ns}")
    if window_ns % substeps_per_window:
        raise ValueError(
            f"window of {window_ns} ns is not divisible into "
            f"{substeps_per_window} substeps"
        )
    return [window_ns // substeps_per_window] * substeps_per_window


@dataclass(frozen=True)
class PhysCoordConfig:
    window_ns: int
    fidelity: ChannelFidelity
    backend: PhysicsBackend = PhysicsBackend.reference()
    agent_address_map: tuple[tuple[int, str], ...] = ()
    substeps_per_window: int = 1

    def __post_init__(self):
        substep_schedule(self.window_ns, self.substeps_per_window)
        amap = tuple((int(a), str(ip)) for a, ip in self.agent_address_map)
        object.__setattr__(self, "agent_address_map", amap)
        ids = [a for a, _ in amap]
        ips = [ip for _, ip in amap]
        if len(set(ids)) != len(ids):
            raise ValueError("agent_address_map repeats an agent id")
        if len(set(ips)) != len(ips):
            raise ValueError("agent_address_map repeats an address")
        for ip in ips:
            try:
                ipaddress.IPv4Address(ip)
            except ValueError:
                raise ValueError(f"bad IPv4 address {ip!r} in agent_address_map") from None


@dataclass
class PhysRunSummary:
    windows_completed: int
    agent_count: int
    extractions: int
    stats: RunStats = field(default_factory=RunStats)


class _WindowDriver:
    """Per-window behaviour handed to the sync peer: run the substeps, then
    extract and compress the channel once."""

    def __init__(self, sim: PhysicsSim, fidelity: ChannelFidelity, schedule: list[int]):
        self._sim = sim
        self._fidelity = fidelity
        self._schedule = schedule
        self.extractions = 0
        self.agent_count = 0

    def simulate(self, t: int, window_ns: int, peer_end) -> PhysicsUpdate:
        for dt in self._schedule:
            self._sim.step(dt)
        snapshot = self._sim.channel_snapshot(self._fidelity)
        self.extractions += 1
        self.agent_count = len(snapshot.node_list)
        blob = wire.compress_channel_blob(wire.encode_channel_data(snapshot))
        return PhysicsUpdate(MsgType.END, t, blob)


def run_physics_coordinator(
    config: PhysCoordConfig,
    link: PeerLink,
    duration_ns: int,
    sim: PhysicsSim,
) -> PhysRunSummary:
    """Drive the PHYSICS_SIDE of the sync protocol for a fixed duration.

    Sync or transport failures propagate to the caller with the partial
    run attached as `exc.partial_summary`.
    """
    if duration_ns <= 0 or duration_ns % config.window_ns:
        raise ValueError(
            f"duration {duration_ns} ns must be a positive multiple of the "
            f"{config.window_ns} ns window"
        )
    n_windows = duration_ns // config.window_ns
    schedule = substep_schedule(config.window_ns, config.substeps_per_window)
    driver = _WindowDriver(sim, config.fidelity, schedule)
    peer = SyncPeer(Role.PHYSICS_SIDE, config.window_ns)
    try:
        peer.start(link)
        for _ in range(n_windows):
            peer.run_window(link, driver)
        peer.shutdown(link)
    except SyncError as exc:
        exc.partial_summary = PhysRunSummary(
            peer.stats.windows_completed, driver.agent_count,
            driver.extractions, peer.stats,
        )
        raise
    return PhysRunSummary(
        peer.stats.windows_completed, driver.agent_count,
        driver.extractions, peer.stats,
    )
