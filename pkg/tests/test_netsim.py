"""Radio model and shared-medium event loop."""

from __future__ import annotations

import math
import random
import threading

import pytest

from cosimnet.netsim import (
    MalformedChannelError,
    MalformedManifestError,
    MediumEventKind,
    RadioParams,
    ReferenceNetSim,
    SocketNetSim,
    compute_link_state,
    serve_netsim_link,
)
from cosimnet.sync import ProtocolError, queue_link_pair
from cosimnet.wire import (
    ChannelData,
    MsgType,
    NetworkUpdate,
    PathDetails,
    Pose,
)

W = 10_000_000  # 10 ms
IP = {0: "10.0.0.1", 1: "10.0.0.2", 2: "10.0.0.3"}
DEFAULTS = RadioParams()


def channel(positions, path_details):
    return ChannelData(tuple(Pose(p) for p in positions), tuple(path_details))


def two_node_channel(distance, wall_loss=None):
    """Two agents on the x axis; wall_loss None means LOS."""
    if wall_loss is None:
        pd = PathDetails((0, 1), True, (0,), ())
    else:
        pd = PathDetails(
            (0, 1), False, (1,), ((distance / 2, 0.0, 0.0, wall_loss),)
        )
    return channel([(0, 0, 0), (distance, 0, 0)], [pd])


def manifest(t, entries=()):
    return NetworkUpdate(
        MsgType.BEGIN,
        t,
        pkt_id=tuple(e[0] for e in entries),
        pkt_lengths=tuple(e[1] for e in entries),
        src_ip=tuple(e[2] for e in entries),
        dst_ip=tuple(e[3] for e in entries),
    )


def new_sim(agents=2, trace=False, params=DEFAULTS):
    amap = {i: IP[i] for i in range(agents)}
    return ReferenceNetSim(params, amap, trace_events=trace)


# -- radio model -------------------------------------------------------------


def test_radio_params_validation():
    with pytest.raises(ValueError, match="thresholds"):
        RadioParams(mcs_table=((5, 6.5e6), (5, 13e6)))
    with pytest.raises(ValueError, match="rates"):
        RadioParams(mcs_table=((5, 13e6), (8, 6.5e6)))
    with pytest.raises(ValueError, match="> 0"):
        RadioParams(mcs_table=((5, 0.0), (8, 6.5e6)))
    with pytest.raises(ValueError, match="queue_capacity"):
        RadioParams(queue_capacity=0)
    with pytest.raises(ValueError, match="ber_at_threshold"):
        RadioParams(ber_at_threshold=0.6)


def test_link_at_reference_distance():
    link = compute_link_state(DEFAULTS, (0, 1), 1.0, 0.0)
    assert link.path_loss == pytest.approx(40.0)
    assert link.snr == pytest.approx(70.0)
    assert link.phy_rate == 65.0e6
    assert link.ber == 1e-9  # floored far above the top threshold


def test_link_at_100m():
    link = compute_link_state(DEFAULTS, (0, 1), 100.0, 0.0)
    assert link.path_loss == pytest.approx(40.0 + 24.0 * 2.0)
    assert link.snr == pytest.approx(22.0)
    assert link.phy_rate == 52.0e6
    assert link.ber == pytest.approx(1e-2 * 10 ** (-2.0 / 3.0))


def test_two_walls_at_100m_kill_the_link():
    link = compute_link_state(DEFAULTS, (0, 1), 100.0, 20.0)
    assert link.snr == pytest.approx(2.0)
    assert link.is_down
    assert link.phy_rate is None
    assert link.ber == 0.5


def test_near_field_saturates_at_pl0():
    link = compute_link_state(DEFAULTS, (0, 1), 0.01, 0.0)
    assert link.path_loss == pytest.approx(40.0)


def test_zero_base_ber_stays_zero():
    params = RadioParams(ber_at_threshold=0.0)
    link = compute_link_state(params, (0, 1), 10.0, 0.0)
    assert link.ber == 0.0
    assert not link.is_down


def test_wall_loss_monotonicity():
    # SNR and PHY rate degrade monotonically with wall loss at any
    # granularity.  BER resets to ber_at_threshold at each MCS downshift,
    # so it is only monotone across coarse (whole-wall, 10 dB) steps at the
    # calibration distance; per-dB it is monotone within one MCS band.
    def rate_key(link):
        return -math.inf if link.phy_rate is None else link.phy_rate

    for distance in (1.0, 10.0, 50.0, 120.0):
        previous = None
        for wall in range(0, 41):
            link = compute_link_state(DEFAULTS, (0, 1), distance, float(wall))
            if previous is not None:
                assert link.snr <= previous.snr
                assert rate_key(link) <= rate_key(previous)
                if link.phy_rate == previous.phy_rate:
                    assert link.ber >= previous.ber
            previous = link


def test_ber_monotone_over_whole_walls_at_50m():
    links = [
        compute_link_state(DEFAULTS, (0, 1), 50.0, 10.0 * walls)
        for walls in range(5)
    ]
    bers = [link.ber for link in links]
    assert bers == sorted(bers)
    assert links[3].is_down and links[4].is_down


# -- channel application -----------------------------------------------------


def test_apply_channel_builds_links():
    sim = new_sim()
    sim.apply_channel(two_node_channel(100.0))
    link = sim.link_state(0, 1)
    assert link.snr == pytest.approx(22.0)
    assert sim.link_state(1, 0) is link  # unordered lookup


def test_apply_channel_sums_first_path_walls():
    sim = new_sim()
    cd = channel(
        [(0, 0, 0), (100, 0, 0)],
        [
            PathDetails(
                (0, 1),
                False,
                (2, 1),
                (
                    (30.0, 0.0, 0.0, 8.0),
                    (60.0, 0.0, 0.0, 5.0),
                    (50.0, 0.0, 0.0, 99.0),  # second path, must be ignored
                ),
            )
        ],
    )
    sim.apply_channel(cd)
    assert sim.link_state(0, 1).wall_loss == pytest.approx(13.0)


def test_apply_channel_rejects_missing_nodes():
    sim = new_sim()
    bad = ChannelData(
        (Pose((0, 0, 0)),), (PathDetails((0, 1), True, (0,), ()),)
    )
    with pytest.raises(MalformedChannelError):
        sim.apply_channel(bad)


def test_apply_channel_replaces_link_table():
    sim = new_sim(agents=3)
    cd3 = channel(
        [(0, 0, 0), (10, 0, 0), (20, 0, 0)],
        [
            PathDetails((0, 1), True, (0,), ()),
            PathDetails((0, 2), True, (0,), ()),
            PathDetails((1, 2), True, (0,), ()),
        ],
    )
    sim.apply_channel(cd3)
    assert sim.link_state(0, 2) is not None
    sim.apply_channel(two_node_channel(10.0))
    assert sim.link_state(0, 2) is None


# -- event loop --------------------------------------------------------------


def test_single_packet_service_time():
    sim = new_sim(trace=True)
    # snr 6 dB: lowest MCS, 6.5 Mb/s
    sim.apply_channel(two_node_channel(1.0, wall_loss=64.0))
    end = sim.advance(0, W, manifest(0, [(0, 1000, IP[0], IP[1])]))
    assert end.clear_pkt_id == (0,)
    assert end.clear_src_ip == (IP[0],)
    assert end.clear_dst_ip == (IP[1],)
    assert end.ber == (pytest.approx(1e-2 * 10 ** (-1.0 / 3.0)),)
    start_ev, end_ev = sim.events
    assert start_ev.kind is MediumEventKind.TX_START and start_ev.time == 0
    assert end_ev.kind is MediumEventKind.TX_END
    assert end_ev.time == 200_000 + round(8000e9 / 6.5e6)
    assert end_ev.time == 1_430_769


def test_empty_manifest_empty_clearances():
    sim = new_sim()
    sim.apply_channel(two_node_channel(10.0))
    end = sim.advance(0, W, manifest(0))
    assert end.msg_type is MsgType.END
    assert end.time_val == 0
    assert end.clear_pkt_id == ()
    assert end.ber == ()


def test_drop_tail_beyond_queue_capacity():
    sim = new_sim()
    sim.apply_channel(two_node_channel(10.0))
    entries = [(i, 100, IP[0], IP[1]) for i in range(200)]
    sim.advance(0, W, manifest(0, entries))
    assert sim.dropped_total == 100
    assert sim.dropped_ids == list(range(100, 200))
    cleared = set()
    for k in range(1, 60):
        end = sim.advance(k * W, W, manifest(k * W))
        cleared.update(end.clear_pkt_id)
    assert sim.queued_count == 0
    assert cleared.union(range(100)) == set(range(100))


def test_zero_length_window_is_a_no_op():
    sim = new_sim(trace=True)
    sim.apply_channel(two_node_channel(10.0))
    end = sim.advance(0, 0, manifest(0))
    assert end.clear_pkt_id == ()
    assert sim.events == []
    end = sim.advance(0, W, manifest(0, [(0, 500, IP[0], IP[1])]))
    assert end.clear_pkt_id == (0,)


def test_link_down_packets_wait_for_channel():
    sim = new_sim()
    sim.apply_channel(two_node_channel(100.0, wall_loss=30.0))  # snr -8: down
    sim.advance(0, W, manifest(0, [(0, 400, IP[0], IP[1])]))
    for k in range(1, 5):
        end = sim.advance(k * W, W, manifest(k * W))
        assert end.clear_pkt_id == ()
    assert sim.queued_count == 1
    sim.apply_channel(two_node_channel(10.0))
    end = sim.advance(5 * W, W, manifest(5 * W))
    assert end.clear_pkt_id == (0,)
    assert sim.queued_count == 0


def test_down_link_packet_does_not_block_live_one():
    sim = new_sim(agents=3)
    cd = channel(
        [(0, 0, 0), (10, 0, 0), (200, 200, 0)],
        [
            PathDetails((0, 1), True, (0,), ()),
            PathDetails((0, 2), False, (1,), ((100.0, 100.0, 0.0, 40.0),)),
            PathDetails((1, 2), False, (1,), ((100.0, 100.0, 0.0, 40.0),)),
        ],
    )
    sim.apply_channel(cd)
    end = sim.advance(
        0, W, manifest(0, [(0, 300, IP[0], IP[2]), (1, 300, IP[0], IP[1])])
    )
    assert end.clear_pkt_id == (1,)  # the live-link packet jumps the dead one
    assert sim.queued_count == 1


def test_clearance_schedule_matches_closed_form():
    rng = random.Random(21)
    for _ in range(20):
        sim = new_sim()
        sim.apply_channel(two_node_channel(1.0, wall_loss=64.0))  # 6.5 Mb/s
        lengths = [rng.randint(100, 1400) for _ in range(rng.randint(1, 5))]
        entries = [(i, n, IP[0], IP[1]) for i, n in enumerate(lengths)]
        cleared_in = {}
        for k in range(40):
            end = sim.advance(k * W, W, manifest(k * W, entries if k == 0 else []))
            for pkt_id in end.clear_pkt_id:
                cleared_in[pkt_id] = k
        cum = 0
        for i, n in enumerate(lengths):
            cum += 200_000 + round(n * 8e9 / 6.5e6)
            assert cleared_in[i] == (cum - 1) // W, f"packet {i} of {lengths}"


def test_two_windows_equal_one_double_window():
    entries = [(i, 900, IP[0], IP[1]) for i in range(12)]
    sim_a = new_sim()
    sim_b = new_sim()
    for sim in (sim_a, sim_b):
        sim.apply_channel(two_node_channel(1.0, wall_loss=64.0))
    end_a1 = sim_a.advance(0, W, manifest(0, entries))
    end_a2 = sim_a.advance(W, W, manifest(W))
    end_b = sim_b.advance(0, 2 * W, manifest(0, entries))
    assert end_a1.clear_pkt_id + end_a2.clear_pkt_id == end_b.clear_pkt_id
    assert end_a1.ber + end_a2.ber == end_b.ber
    assert end_a1.clear_pkt_id  # the split actually partitions
    assert end_a2.clear_pkt_id
    # both simulators continue identically from t = 2W
    more = [(100 + i, 500, IP[1], IP[0]) for i in range(3)]
    assert sim_a.advance(2 * W, W, manifest(2 * W, more)) == sim_b.advance(
        2 * W, W, manifest(2 * W, more)
    )


def test_manifest_validation_errors():
    sim = new_sim()
    sim.apply_channel(two_node_channel(10.0))
    with pytest.raises(MalformedManifestError, match="BEGIN"):
        sim.advance(0, W, NetworkUpdate(MsgType.END, 0))
    with pytest.raises(MalformedManifestError, match="window starts"):
        sim.advance(0, W, manifest(W))
    with pytest.raises(MalformedManifestError, match="clearance"):
        sim.advance(
            0, W,
            NetworkUpdate(
                MsgType.BEGIN, 0,
                clear_pkt_id=(1,), clear_src_ip=(IP[0],),
                clear_dst_ip=(IP[1],), ber=(0.0,),
            ),
        )
    with pytest.raises(MalformedManifestError, match="not a configured agent"):
        sim.advance(0, W, manifest(0, [(0, 100, IP[0], "10.9.9.9")]))
    with pytest.raises(MalformedManifestError, match="self-addressed"):
        sim.advance(0, W, manifest(0, [(0, 100, IP[0], IP[0])]))
    with pytest.raises(MalformedManifestError, match="empty payload"):
        sim.advance(0, W, manifest(0, [(0, 0, IP[0], IP[1])]))
    sim.advance(0, W, manifest(0, [(7, 100, IP[0], IP[1])]))
    with pytest.raises(MalformedManifestError, match="already submitted"):
        sim.advance(W, W, manifest(W, [(7, 100, IP[0], IP[1])]))
    with pytest.raises(MalformedManifestError, match="overlaps"):
        sim.advance(0, W, manifest(0))


def test_ragged_manifest_rejected():
    sim = new_sim()
    bad = NetworkUpdate(MsgType.BEGIN, 0, pkt_id=(0,), pkt_lengths=(10, 20),
                        src_ip=(IP[0],), dst_ip=(IP[1],))
    with pytest.raises(MalformedManifestError):
        sim.advance(0, W, bad)


def test_packet_conservation_under_random_traffic():
    rng = random.Random(77)
    sim = new_sim(agents=3, trace=True)
    submitted = set()
    cleared = []
    next_id = 0
    for k in range(120):
        if rng.random() < 0.3:
            wall = rng.choice([0.0, 30.0])
            sim.apply_channel(two_node_channel(100.0, wall_loss=wall or None)
                              if wall else two_node_channel(50.0))
        entries = []
        for _ in range(rng.randint(0, 6)):
            src, dst = rng.sample([0, 1], 2)
            entries.append((next_id, rng.randint(50, 1200), IP[src], IP[dst]))
            submitted.add(next_id)
            next_id += 1
        end = sim.advance(k * W, W, manifest(k * W, entries))
        cleared.extend(end.clear_pkt_id)
    assert len(cleared) == len(set(cleared)), "duplicate clearance"
    accounted = set(cleared) | set(sim.dropped_ids)
    assert accounted <= submitted
    assert len(accounted) + sim.queued_count == len(submitted)
    times = [e.time for e in sim.events]
    assert times == sorted(times)


def test_causality_and_determinism():
    def drive(sim):
        rng = random.Random(13)
        outputs = []
        next_id = 0
        submitted_window = {}
        for k in range(60):
            if k % 7 == 0:
                sim.apply_channel(two_node_channel(20.0 + (k % 3) * 40.0))
            entries = []
            for _ in range(rng.randint(0, 3)):
                entries.append((next_id, rng.randint(64, 1500), IP[0], IP[1]))
                submitted_window[next_id] = k
                next_id += 1
            end = sim.advance(k * W, W, manifest(k * W, entries))
            for pkt_id in end.clear_pkt_id:
                assert k >= submitted_window[pkt_id]
            outputs.append(end)
        return outputs

    assert drive(new_sim()) == drive(new_sim())


# -- socket-backed simulator ------------------------------------------------


def test_socket_netsim_echoes_reference():
    server_link, client_link = queue_link_pair()
    server_sim = new_sim()
    server = threading.Thread(
        target=serve_netsim_link, args=(server_link, server_sim, W)
    )
    server.start()
    try:
        remote = SocketNetSim(client_link, W)
        local = new_sim()
        rng = random.Random(3)
        next_id = 0
        for k in range(30):
            if k % 5 == 0:
                cd = two_node_channel(10.0 + 30.0 * (k % 4))
                remote.apply_channel(cd)
                local.apply_channel(cd)
            entries = []
            for _ in range(rng.randint(0, 4)):
                entries.append((next_id, rng.randint(100, 1200), IP[0], IP[1]))
                next_id += 1
            m = manifest(k * W, entries)
            assert remote.advance(k * W, W, m) == local.advance(k * W, W, m)
    finally:
        client_link.close()
        server.join(timeout=10)
    assert not server.is_alive()


def test_socket_netsim_rejects_other_window_sizes():
    _, client_link = queue_link_pair()
    remote = SocketNetSim(client_link, W)
    with pytest.raises(ProtocolError, match="window"):
        remote.advance(0, 2 * W, manifest(0))
