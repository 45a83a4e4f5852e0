"""Physics coordinator: substep schedule, config checks, windowed runs."""

from __future__ import annotations

import math
import threading

import pytest

from cosimnet import wire
from cosimnet.phys_coord import (
    PhysCoordConfig,
    PhysicsBackend,
    run_physics_coordinator,
    substep_schedule,
)
from cosimnet.physics import (
    AgentTrack,
    Box,
    ChannelFidelity,
    ReferencePhysicsSim,
    WorldModel,
)
from cosimnet.sync import (
    DesyncError,
    Role,
    SyncPeer,
    queue_link_pair,
)
from cosimnet.wire import MsgType, NetworkUpdate

W = 1_000_000  # 1 ms


def test_substep_schedule_examples():
    assert substep_schedule(1_000_000, 10) == [100_000] * 10
    assert substep_schedule(1_000_000, 1) == [1_000_000]
    with pytest.raises(ValueError, match="divisible"):
        substep_schedule(1_000_000, 3)


def test_config_rejects_duplicate_agent_id():
    with pytest.raises(ValueError, match="agent id"):
        PhysCoordConfig(
            W, ChannelFidelity.los_nlos(),
            agent_address_map=((0, "10.0.0.1"), (0, "10.0.0.2")),
        )


def test_config_rejects_duplicate_address():
    with pytest.raises(ValueError, match="address"):
        PhysCoordConfig(
            W, ChannelFidelity.los_nlos(),
            agent_address_map=((0, "10.0.0.1"), (1, "10.0.0.1")),
        )


def test_config_rejects_bad_ip():
    with pytest.raises(ValueError, match="IPv4"):
        PhysCoordConfig(
            W, ChannelFidelity.los_nlos(), agent_address_map=((0, "10.0.0"),)
        )


def test_socket_backend_needs_address():
    with pytest.raises(ValueError, match="address"):
        PhysicsBackend(PhysicsBackend.socket("h", 1).kind)
    assert PhysicsBackend.socket("sim-host", 5000).address == ("sim-host", 5000)


def flat_world():
    world = WorldModel(Box((-50, -50, -5), (150, 50, 20)))
    tracks = [
        AgentTrack(0, ((0, 0, 1), (100, 0, 1)), speed=2.0),
        AgentTrack(1, ((0, 10, 1), (20, 10, 1)), speed=2.0, loop=True),
    ]
    return world, tracks


class NetworkStub:
    """Minimal NETWORK_SIDE peer collecting the physics END payloads."""

    def __init__(self, link, n_windows, window_ns=W):
        self.link = link
        self.n_windows = n_windows
        self.window_ns = window_ns
        self.payloads = []
        self.error = None
        self.thread = threading.Thread(target=self._run)

    def _run(self):
        try:
            peer = SyncPeer(Role.NETWORK_SIDE, self.window_ns)
            peer.start(self.link)
            stub = self

            class Driver:
                def simulate(self, t, window_ns, peer_end):
                    if peer_end is not None:
                        stub.payloads.append(peer_end.channel_data)
                    return NetworkUpdate(MsgType.END, t)

            driver = Driver()
            for _ in range(self.n_windows):
                report = peer.run_window(self.link, driver)
            self.payloads.append(report.peer_end.channel_data)
            peer.shutdown(self.link)
        except Exception as exc:  # surfaced by the test thread join
            self.error = exc

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc_info):
        self.thread.join(timeout=30)
        assert not self.thread.is_alive(), "network stub hung"


def run_coordinator(config, n_windows, sim):
    link_p, link_n = queue_link_pair()
    with NetworkStub(link_n, n_windows, config.window_ns) as stub:
        summary = run_physics_coordinator(
            config, link_p, n_windows * config.window_ns, sim
        )
    if stub.error is not None:
        raise stub.error
    return summary, stub.payloads


def test_window_count_matches_duration():
    world, tracks = flat_world()
    config = PhysCoordConfig(W, ChannelFidelity.los_nlos())
    summary, payloads = run_coordinator(config, 20, ReferencePhysicsSim(world, tracks))
    assert summary.windows_completed == 20
    assert summary.extractions == 20
    assert summary.agent_count == 2
    assert len(payloads) == 20


def test_duration_must_be_multiple_of_window():
    config = PhysCoordConfig(W, ChannelFidelity.los_nlos())
    world, tracks = flat_world()
    link_p, _ = queue_link_pair()
    with pytest.raises(ValueError, match="multiple"):
        run_physics_coordinator(
            config, link_p, W + 1, ReferencePhysicsSim(world, tracks)
        )


def test_static_agents_give_identical_windows():
    world = WorldModel(Box((-50, -50, -5), (150, 50, 20)))
    # single-waypoint tracks park the agents
    tracks = [
        AgentTrack(0, ((0.0, 0.0, 1.0),), speed=1.0),
        AgentTrack(1, ((30.0, 0.0, 1.0),), speed=1.0),
    ]
    config = PhysCoordConfig(W, ChannelFidelity.los_nlos())
    _, payloads = run_coordinator(config, 10, ReferencePhysicsSim(world, tracks))
    assert len(set(payloads)) == 1
    decoded = wire.decode_channel_data(wire.decompress_channel_blob(payloads[0]))
    assert decoded.node_list[1].position == (30.0, 0.0, 1.0)


def test_moving_agents_obey_kinematic_bound():
    world, tracks = flat_world()
    window_ns = 100_000_000  # 0.1 s so agents visibly move
    config = PhysCoordConfig(window_ns, ChannelFidelity.los_nlos())
    _, payloads = run_coordinator(config, 15, ReferencePhysicsSim(world, tracks))
    snapshots = [
        wire.decode_channel_data(wire.decompress_channel_blob(p)) for p in payloads
    ]
    for prev, cur in zip(snapshots, snapshots[1:]):
        for track, a, b in zip(tracks, prev.node_list, cur.node_list):
            bound = track.speed * window_ns * 1e-9 + 1e-9
            assert math.dist(a.position, b.position) <= bound


def test_substeps_advance_physics_in_equal_slices():
    world, tracks = flat_world()

    class CountingSim(ReferencePhysicsSim):
        def __init__(self, *args):
            super().__init__(*args)
            self.dts = []

        def step(self, dt_ns):
            self.dts.append(dt_ns)
            super().step(dt_ns)

    sim = CountingSim(world, tracks)
    config = PhysCoordConfig(W, ChannelFidelity.los_nlos(), substeps_per_window=4)
    summary, _ = run_coordinator(config, 6, sim)
    assert sim.dts == [W // 4] * (4 * 6)
    assert sum(sim.dts) == 6 * W
    assert summary.extractions == 6


def test_desync_aborts_with_partial_summary():
    world, tracks = flat_world()
    config = PhysCoordConfig(W, ChannelFidelity.los_nlos())
    link_p, link_n = queue_link_pair()

    def rogue_network():
        link_n.recv()  # BEGIN(0)
        link_n.send(NetworkUpdate(MsgType.BEGIN, 0))
        link_n.send(NetworkUpdate(MsgType.END, 0))
        link_n.recv()  # END(0)
        link_n.recv()  # BEGIN(W)
        link_n.send(NetworkUpdate(MsgType.BEGIN, 5 * W))  # jumps ahead

    rogue = threading.Thread(target=rogue_network)
    rogue.start()
    with pytest.raises(DesyncError) as excinfo:
        run_physics_coordinator(
            config, link_p, 10 * W, ReferencePhysicsSim(world, tracks)
        )
    rogue.join(timeout=10)
    assert excinfo.value.partial_summary.windows_completed == 1
