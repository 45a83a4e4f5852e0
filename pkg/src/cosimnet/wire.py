"""Binary wire protocol spoken between the two simulation coordinators.

Every message travels in a self-delimiting frame:

    +-----------+---------+--------------+------------------+
    | magic 4B  | tag 1B  | length u32LE | payload bytes    |
    | "RNS1"    | 0x00/01 |              |                  |
    +-----------+---------+--------------+------------------+

Tag 0x00 carries a PhysicsUpdate, tag 0x01 a NetworkUpdate.  Payload fields
are packed in declaration order: enums as one byte, integers little-endian
fixed width, floats as IEEE-754 doubles (little-endian), IPv4 addresses as
four bytes in network order.  Every list is prefixed with a u32 element
count and byte strings with a u32 length.

Channel descriptions (ChannelData) have their own flat encoding and are
carried inside PhysicsUpdate frames as a raw-DEFLATE-compressed byte string:

    u32 agent count
    per agent: 7 doubles (position x, y, z; orientation x, y, z, w)
    u32 path entry count
    per path entry:
        u32 id[0], u32 id[1], u8 los,
        u32 path count, u32 hop count per path...,
        sum(num_hops) * 4 doubles (hop x, y, z, penetration loss dB)

Decoding is streaming-safe: ``decode_frame`` reports "need more bytes" for
an incomplete frame instead of raising, so callers can accumulate socket
reads in a buffer and peel off complete frames as they arrive.
"""

from __future__ import annotations

import ipaddress
import math
import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

MAGIC = b"RNS1"
TAG_PHYSICS_UPDATE = 0x00
TAG_NETWORK_UPDATE = 0x01

MAX_FRAME_PAYLOAD = 16 * 1024 * 1024
MAX_DECOMPRESSED_CHANNEL = 64 * 1024 * 1024

QUATERNION_NORM_TOL = 1e-6

_HEADER = struct.Struct("<4sBI")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")
_POSE = struct.Struct("<7d")
_HOP = struct.Struct("<4d")


class MsgType(IntEnum):
    BEGIN = 0x00
    END = 0x01


class WireError(Exception):
    """Base class for encode/decode failures."""


class FrameError(WireError):
    """Structurally malformed frame or payload; names the failing field."""


class InvariantViolation(WireError):
    """Message content violates a declared type invariant."""


class CompressionError(WireError):
    """Corrupt DEFLATE stream or decompressed size over the cap."""


def _f3(values) -> tuple[float, float, float]:
    x, y, z = values
    return (float(x), float(y), float(z))


@dataclass(frozen=True)
class Pose:
    """Agent position (meters) and orientation as a unit quaternion."""

    position: tuple[float, float, float]
    orientation: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "position", _f3(self.position))
        qx, qy, qz, qw = self.orientation
        object.__setattr__(
            self, "orientation", (float(qx), float(qy), float(qz), float(qw))
        )


@dataclass(frozen=True)
class PathDetails:
    """Propagation summary for one unordered agent pair.

    ``num_hops`` holds one entry per reported path; ``hop_points`` holds the
    concatenated hop tuples (x, y, z, penetration loss in dB) for all paths
    in order.  A direct line-of-sight path is a single entry with zero hops.
    """

    ids: tuple[int, int]
    los: bool
    num_hops: tuple[int, ...] = ()
    hop_points: tuple[tuple[float, float, float, float], ...] = ()

    def __post_init__(self):
        a, b = self.ids
        object.__setattr__(self, "ids", (int(a), int(b)))
        object.__setattr__(self, "los", bool(self.los))
        object.__setattr__(self, "num_hops", tuple(int(n) for n in self.num_hops))
        object.__setattr__(
            self,
            "hop_points",
            tuple((float(x), float(y), float(z), float(l)) for x, y, z, l in self.hop_points),
        )


@dataclass(frozen=True)
class ChannelData:
    """Poses of all agents plus per-pair propagation paths."""

    node_list: tuple[Pose, ...] = ()
    path_details: tuple[PathDetails, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "node_list", tuple(self.node_list))
        object.__setattr__(self, "path_details", tuple(self.path_details))


@dataclass(frozen=True)
class PhysicsUpdate:
    """Window marker from the physics side; END frames carry channel data."""

    msg_type: MsgType
    time_val: int
    channel_data: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        object.__setattr__(self, "time_val", int(self.time_val))
        object.__setattr__(self, "channel_data", bytes(self.channel_data))


@dataclass(frozen=True)
class NetworkUpdate:
    """Window marker from the network side.

    BEGIN frames list newly captured packets (the manifest); END frames list
    packets cleared during the window together with the bit error rate each
    one saw on the air.
    """

    msg_type: MsgType
    time_val: int
    pkt_id: tuple[int, ...] = ()
    pkt_lengths: tuple[int, ...] = ()
    src_ip: tuple[str, ...] = ()
    dst_ip: tuple[str, ...] = ()
    clear_pkt_id: tuple[int, ...] = ()
    clear_src_ip: tuple[str, ...] = ()
    clear_dst_ip: tuple[str, ...] = ()
    ber: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        object.__setattr__(self, "time_val", int(self.time_val))
        object.__setattr__(self, "pkt_id", tuple(int(v) for v in self.pkt_id))
        object.__setattr__(self, "pkt_lengths", tuple(int(v) for v in self.pkt_lengths))
        object.__setattr__(self, "src_ip", tuple(str(v) for v in self.src_ip))
        object.__setattr__(self, "dst_ip", tuple(str(v) for v in self.dst_ip))
        object.__setattr__(self, "clear_pkt_id", tuple(int(v) for v in self.clear_pkt_id))
        object.__setattr__(self, "clear_src_ip", tuple(str(v) for v in self.clear_src_ip))
        object.__setattr__(self, "clear_dst_ip", tuple(str(v) for v in self.clear_dst_ip))
        object.__setattr__(self, "ber", tuple(float(v) for v in self.ber))


# ---------------------------------------------------------------------------
# validation

def _check_u32(value: int, what: str) -> None:
    if not 0 <= value < 2**32:
        raise InvariantViolation(f"{what}: {value} out of u32 range")


def _check_u64(value: int, what: str) -> None:
    if not 0 <= value < 2**64:
        raise InvariantViolation(f"{what}: {value} out of u64 range")


def _check_ipv4(addr: str, what: str) -> None:
    try:
        ipaddress.IPv4Address(addr)
    except (ipaddress.AddressValueError, ValueError):
        raise InvariantViolation(f"{what}: {addr!r} is not an IPv4 address") from None


def validate_pose(pose: Pose, what: str = "Pose") -> None:
    for v in pose.position:
        if not math.isfinite(v):
            raise InvariantViolation(f"{what}.position: component {v!r} not finite")
    for v in pose.orientation:
        if not math.isfinite(v):
            raise InvariantViolation(f"{what}.orientation: component {v!r} not finite")
    norm = math.sqrt(sum(v * v for v in pose.orientation))
    if abs(norm - 1.0) > QUATERNION_NORM_TOL:
        raise InvariantViolation(
            f"{what}.orientation: quaternion norm {norm!r} not within "
            f"{QUATERNION_NORM_TOL} of 1"
        )


def validate_channel_data(cd: ChannelData) -> None:
    for i, pose in enumerate(cd.node_list):
        validate_pose(pose, f"ChannelData.node_list[{i}]")
    if len(cd.node_list) < 2 and cd.path_details:
        raise InvariantViolation(
            "ChannelData.path_details: must be empty with fewer than two agents"
        )
    seen_pairs = set()
    n = len(cd.node_list)
    for k, pd in enumerate(cd.path_details):
        what = f"ChannelData.path_details[{k}]"
        a, b = pd.ids
        if a == b:
            raise InvariantViolation(f"{what}.ids: pair ({a}, {b}) must be distinct")
        for v in (a, b):
            if not 0 <= v < n:
                raise InvariantViolation(
                    f"{what}.ids: {v} does not index the node_list (size {n})"
                )
        pair = (min(a, b), max(a, b))
        if pair in seen_pairs:
            raise InvariantViolation(f"{what}.ids: duplicate entry for pair {pair}")
        seen_pairs.add(pair)
        for h in pd.num_hops:
            if h < 0:
                raise InvariantViolation(f"{what}.num_hops: negative count {h}")
            _check_u32(h, f"{what}.num_hops")
        if sum(pd.num_hops) != len(pd.hop_points):
            raise InvariantViolation(
                f"{what}: sum(num_hops)={sum(pd.num_hops)} does not match "
                f"{len(pd.hop_points)} hop points"
            )
        for j, (x, y, z, loss) in enumerate(pd.hop_points):
            for v in (x, y, z, loss):
                if not math.isfinite(v):
                    raise InvariantViolation(
                        f"{what}.hop_points[{j}]: component {v!r} not finite"
                    )
            if loss < 0:
                raise InvariantViolation(
                    f"{what}.hop_points[{j}]: penetration loss {loss!r} negative"
                )


def validate_physics_update(msg: PhysicsUpdate) -> None:
    if msg.msg_type not in (MsgType.BEGIN, MsgType.END):
        raise InvariantViolation(f"PhysicsUpdate.msg_type: unknown value {msg.msg_type}")
    _check_u64(msg.time_val, "PhysicsUpdate.time_val")
    if msg.channel_data:
        try:
            decode_channel_data(decompress_channel_blob(msg.channel_data))
        except WireError as exc:
            raise InvariantViolation(
                f"PhysicsUpdate.channel_data: does not hold a valid compressed "
                f"channel description ({exc})"
            ) from exc


def validate_network_update(msg: NetworkUpdate) -> None:
    if msg.msg_type not in (MsgType.BEGIN, MsgType.END):
        raise InvariantViolation(f"NetworkUpdate.msg_type: unknown value {msg.msg_type}")
    _check_u64(msg.time_val, "NetworkUpdate.time_val")
    manifest_lens = {
        "pkt_id": len(msg.pkt_id),
        "pkt_lengths": len(msg.pkt_lengths),
        "src_ip": len(msg.src_ip),
        "dst_ip": len(msg.dst_ip),
    }
    if len(set(manifest_lens.values())) != 1:
        raise InvariantViolation(
            f"NetworkUpdate manifest lists must share one length, got {manifest_lens}"
        )
    clear_lens = {
        "clear_pkt_id": len(msg.clear_pkt_id),
        "clear_src_ip": len(msg.clear_src_ip),
        "clear_dst_ip": len(msg.clear_dst_ip),
        "ber": len(msg.ber),
    }
    if len(set(clear_lens.values())) != 1:
        raise InvariantViolation(
            f"NetworkUpdate clearance lists must share one length, got {clear_lens}"
        )
    for pid in msg.pkt_id:
        _check_u64(pid, "NetworkUpdate.pkt_id")
    if len(set(msg.pkt_id)) != len(msg.pkt_id):
        raise InvariantViolation("NetworkUpdate.pkt_id: duplicate packet id in manifest")
    for length in msg.pkt_lengths:
        _check_u32(length, "NetworkUpdate.pkt_lengths")
    for pid in msg.clear_pkt_id:
        _check_u64(pid, "NetworkUpdate.clear_pkt_id")
    if len(set(msg.clear_pkt_id)) != len(msg.clear_pkt_id):
        raise InvariantViolation(
            "NetworkUpdate.clear_pkt_id: duplicate packet id in clearances"
        )
    for addr in msg.src_ip:
        _check_ipv4(addr, "NetworkUpdate.src_ip")
    for addr in msg.dst_ip:
        _check_ipv4(addr, "NetworkUpdate.dst_ip")
    for addr in msg.clear_src_ip:
        _check_ipv4(addr, "NetworkUpdate.clear_src_ip")
    for addr in msg.clear_dst_ip:
        _check_ipv4(addr, "NetworkUpdate.clear_dst_ip")
    for b in msg.ber:
        if not (0.0 <= b <= 1.0):
            raise InvariantViolation(f"NetworkUpdate.ber: {b!r} outside [0, 1]")


# ---------------------------------------------------------------------------
# compression (raw DEFLATE, RFC 1951)

def compress_channel_blob(data: bytes) -> bytes:
    co = zlib.compressobj(level=6, wbits=-zlib.MAX_WBITS)
    return co.compress(data) + co.flush()


def decompress_channel_blob(blob: bytes) -> bytes:
    do = zlib.decompressobj(wbits=-zlib.MAX_WBITS)
    try:
        out = do.decompress(blob, MAX_DECOMPRESSED_CHANNEL)
    except zlib.error as exc:
        raise CompressionError(f"corrupt DEFLATE stream: {exc}") from exc
    if do.unconsumed_tail:
        raise CompressionError(
            f"decompressed channel data exceeds {MAX_DECOMPRESSED_CHANNEL} byte cap"
        )
    if not do.eof:
        raise CompressionError("truncated DEFLATE stream")
    if do.unused_data:
        raise CompressionError("trailing bytes after DEFLATE stream")
    return out


# ---------------------------------------------------------------------------
# reading helper

class _Reader:
    """Cursor over a payload that raises FrameError on underrun."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def _take(self, n: int, fieldname: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FrameError(f"{self.what}.{fieldname}: payload truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self, fieldname: str) -> int:
        return self._take(1, fieldname)[0]

    def u32(self, fieldname: str) -> int:
        return _U32.unpack(self._take(4, fieldname))[0]

    def u64(self, fieldname: str) -> int:
        return _U64.unpack(self._take(8, fieldname))[0]

    def f64(self, fieldname: str) -> float:
        return _F64.unpack(self._take(8, fieldname))[0]

    def ipv4(self, fieldname: str) -> str:
        raw = self._take(4, fieldname)
        return str(ipaddress.IPv4Address(raw))

    def raw(self, n: int, fieldname: str) -> bytes:
        return self._take(n, fieldname)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FrameError(
                f"{self.what}: {len(self.data) - self.pos} trailing bytes in payload"
            )


# ---------------------------------------------------------------------------
# channel data codec

def encode_channel_data(cd: ChannelData) -> bytes:
    validate_channel_data(cd)
    parts = [_U32.pack(len(cd.node_list))]
    for pose in cd.node_list:
        parts.append(_POSE.pack(*pose.position, *pose.orientation))
    parts.append(_U32.pack(len(cd.path_details)))
    for pd in cd.path_details:
        parts.append(_U32.pack(pd.ids[0]))
        parts.append(_U32.pack(pd.ids[1]))
        parts.append(bytes([1 if pd.los else 0]))
        parts.append(_U32.pack(len(pd.num_hops)))
        for h in pd.num_hops:
            parts.append(_U32.pack(h))
        for hop in pd.hop_points:
            parts.append(_HOP.pack(*hop))
    return b"".join(parts)


def decode_channel_data(data: bytes) -> ChannelData:
    r = _Reader(data, "ChannelData")
    n_agents = r.u32("agent_count")
    nodes = []
    for i in range(n_agents):
        vals = _POSE.unpack(r.raw(_POSE.size, f"node_list[{i}]"))
        nodes.append(Pose(position=vals[:3], orientation=vals[3:]))
    n_paths = r.u32("path_count")
    paths = []
    for k in range(n_paths):
        what = f"path_details[{k}]"
        id0 = r.u32(f"{what}.ids[0]")
        id1 = r.u32(f"{what}.ids[1]")
        los_raw = r.u8(f"{what}.los")
        if los_raw not in (0, 1):
            raise FrameError(f"ChannelData.{what}.los: invalid boolean byte {los_raw}")
        n_sub = r.u32(f"{what}.path_count")
        num_hops = tuple(r.u32(f"{what}.num_hops[{j}]") for j in range(n_sub))
        total_hops = sum(num_hops)
        hops = tuple(
            _HOP.unpack(r.raw(_HOP.size, f"{what}.hop_points[{j}]"))
            for j in range(total_hops)
        )
        paths.append(
            PathDetails(ids=(id0, id1), los=bool(los_raw), num_hops=num_hops, hop_points=hops)
        )
    r.finish()
    cd = ChannelData(node_list=tuple(nodes), path_details=tuple(paths))
    validate_channel_data(cd)
    return cd


# ---------------------------------------------------------------------------
# frame codec

def _encode_physics_payload(msg: PhysicsUpdate) -> bytes:
    return b"".join(
        [
            bytes([int(msg.msg_type)]),
            _U64.pack(msg.time_val),
            _U32.pack(len(msg.channel_data)),
            msg.channel_data,
        ]
    )


def _encode_ip_list(addrs) -> bytes:
    parts = [_U32.pack(len(addrs))]
    for addr in addrs:
        parts.append(ipaddress.IPv4Address(addr).packed)
    return b"".join(parts)


def _encode_network_payload(msg: NetworkUpdate) -> bytes:
    parts = [bytes([int(msg.msg_type)]), _U64.pack(msg.time_val)]
    parts.append(_U32.pack(len(msg.pkt_id)))
    for v in msg.pkt_id:
        parts.append(_U64.pack(v))
    parts.append(_U32.pack(len(msg.pkt_lengths)))
    for v in msg.pkt_lengths:
        parts.append(_U32.pack(v))
    parts.append(_encode_ip_list(msg.src_ip))
    parts.append(_encode_ip_list(msg.dst_ip))
    parts.append(_U32.pack(len(msg.clear_pkt_id)))
    for v in msg.clear_pkt_id:
        parts.append(_U64.pack(v))
    parts.append(_encode_ip_list(msg.clear_src_ip))
    parts.append(_encode_ip_list(msg.clear_dst_ip))
    parts.append(_U32.pack(len(msg.ber)))
    for v in msg.ber:
        parts.append(_F64.pack(v))
    return b"".join(parts)


def encode_frame(msg: PhysicsUpdate | NetworkUpdate) -> bytes:
    if isinstance(msg, PhysicsUpdate):
        validate_physics_update(msg)
        tag = TAG_PHYSICS_UPDATE
        payload = _encode_physics_payload(msg)
    elif isinstance(msg, NetworkUpdate):
        validate_network_update(msg)
        tag = TAG_NETWORK_UPDATE
        payload = _encode_network_payload(msg)
    else:
        raise TypeError(f"cannot encode {type(msg).__name__} as a frame")
    if len(payload) > MAX_FRAME_PAYLOAD:
        raise FrameError(
            f"payload of {len(payload)} bytes exceeds the {MAX_FRAME_PAYLOAD} byte cap"
        )
    return _HEADER.pack(MAGIC, tag, len(payload)) + payload


def _decode_msg_type(r: _Reader, what: str) -> MsgType:
    raw = r.u8("msg_type")
    if raw not in (int(MsgType.BEGIN), int(MsgType.END)):
        raise FrameError(f"{what}.msg_type: unknown enum byte {raw:#04x}")
    return MsgType(raw)


def _decode_physics_payload(payload: bytes) -> PhysicsUpdate:
    r = _Reader(payload, "PhysicsUpdate")
    msg_type = _decode_msg_type(r, "PhysicsUpdate")
    time_val = r.u64("time_val")
    blob_len = r.u32("channel_data.length")
    blob = r.raw(blob_len, "channel_data")
    r.finish()
    msg = PhysicsUpdate(msg_type=msg_type, time_val=time_val, channel_data=blob)
    validate_physics_update(msg)
    return msg


def _decode_ip_list(r: _Reader, fieldname: str) -> tuple[str, ...]:
    count = r.u32(f"{fieldname}.count")
    return tuple(r.ipv4(f"{fieldname}[{i}]") for i in range(count))


def _decode_network_payload(payload: bytes) -> NetworkUpdate:
    r = _Reader(payload, "NetworkUpdate")
    msg_type = _decode_msg_type(r, "NetworkUpdate")
    time_val = r.u64("time_val")
    n = r.u32("pkt_id.count")
    pkt_id = tuple(r.u64(f"pkt_id[{i}]") for i in range(n))
    n = r.u32("pkt_lengths.count")
    pkt_lengths = tuple(r.u32(f"pkt_lengths[{i}]") for i in range(n))
    src_ip = _decode_ip_list(r, "src_ip")
    dst_ip = _decode_ip_list(r, "dst_ip")
    n = r.u32("clear_pkt_id.count")
    clear_pkt_id = tuple(r.u64(f"clear_pkt_id[{i}]") for i in range(n))
    clear_src_ip = _decode_ip_list(r, "clear_src_ip")
    clear_dst_ip = _decode_ip_list(r, "clear_dst_ip")
    n = r.u32("ber.count")
    ber = tuple(r.f64(f"ber[{i}]") for i in range(n))
    r.finish()
    msg = NetworkUpdate(
        msg_type=msg_type,
        time_val=time_val,
        pkt_id=pkt_id,
        pkt_lengths=pkt_lengths,
        src_ip=src_ip,
        dst_ip=dst_ip,
        clear_pkt_id=clear_pkt_id,
        clear_src_ip=clear_src_ip,
        clear_dst_ip=clear_dst_ip,
        ber=ber,
    )
    validate_network_update(msg)
    return msg


def decode_frame(buf: bytes) -> tuple[PhysicsUpdate | NetworkUpdate | None, bytes]:
    """Peel one frame off ``buf``.

    Returns ``(message, remaining_bytes)``.  When the buffer does not yet
    hold a complete frame the result is ``(None, buf)`` so the caller can
    read more input and retry; structural problems raise FrameError and
    content problems raise InvariantViolation.
    """
    probe = min(len(buf), len(MAGIC))
    if buf[:probe] != MAGIC[:probe]:
        raise FrameError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        return None, buf
    magic, tag, length = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if length > MAX_FRAME_PAYLOAD:
        raise FrameError(
            f"declared payload of {length} bytes exceeds the "
            f"{MAX_FRAME_PAYLOAD} byte cap"
        )
    if tag not in (TAG_PHYSICS_UPDATE, TAG_NETWORK_UPDATE):
        raise FrameError(f"unknown frame tag {tag:#04x}")
    end = _HEADER.size + length
    if len(buf) < end:
        return None, buf
    payload = buf[_HEADER.size : end]
    if tag == TAG_PHYSICS_UPDATE:
        msg = _decode_physics_payload(payload)
    else:
        msg = _decode_network_payload(payload)
    return msg, buf[end:]
