"""Guard-to-guard secure channel: a desk-scale stand-in for TLS 1.3 + kTLS.

The simulation keeps what the authorization protocol depends on:

* mutual authentication against a set of trusted guard keys, with
  signatures over the running transcript and an X25519 key exchange;
* a per-channel exporter with the RFC 8446 shape
  ``HKDF-Expand(secret, label || H(context), L)``;
* MAC-protected, sequence-numbered records;
* resumption from a cached peer context (stateless ticket), which skips
  the signature-based mutual authentication;
* an "offload" mode that is functionally identical to the default record
  path but counted separately.

Record frame layout: ``seq u64 || len u32 || ciphertext || mac[32]``.
"""

from __future__ import annotations

import enum
import hmac
import random
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF, HKDFExpand

from .core import (
    Digest,
    HostIdentity,
    Reader,
    digest,
    lp16,
    sign,
    u32,
    u64,
    verify,
    verify_key_of,
)
from .errors import (
    HandshakeAuthFailure,
    InvalidLength,
    NotEstablished,
    RecordAuthFailure,
    StalePeerContext,
    TransportClosed,
)

EXPORTER_MASTER_LABEL = b"grimlock sim exporter master"
RESUMED_MASTER_LABEL = b"grimlock sim resumed exporter master"
RESUMPTION_LABEL = b"grimlock sim resumption"
MAX_EXPORT_LEN = 255 * 32
MAC_LEN = 32
RECORD_HEADER_LEN = 12

# handshake message types
_CH, _SH, _CF, _NST = 0x01, 0x02, 0x03, 0x04
_PSK_CH, _PSK_SH, _PSK_CF = 0x11, 0x12, 0x13


def hkdf_expand(secret: bytes, info: bytes, length: int) -> bytes:
    return HKDFExpand(hashes.SHA256(), length, info).derive(secret)


def hkdf(ikm: bytes, salt: bytes, info: bytes, length: int = 32) -> bytes:
    return HKDF(hashes.SHA256(), length, salt, info).derive(ikm)


class Side(enum.Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"

    @property
    def other(self) -> "Side":
        return Side.RESPONDER if self is Side.INITIATOR else Side.INITIATOR


# -- transport and adversary instrumentation ---------------------------------

Interceptor = Callable[[Side, bytes], Iterable[bytes]]


class Transport:
    """In-memory duplex pipe between an initiator end and a responder end.

    Frames are totally ordered per direction. Interceptors may rewrite,
    drop or multiply frames in flight; taps see frames as the sender
    emitted them.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self.closed = False
        self._lock = threading.Lock()
        self._inbox: dict[Side, deque[bytes]] = {Side.INITIATOR: deque(), Side.RESPONDER: deque()}
        self._taps: list[Tap] = []
        self._interceptors: list[Interceptor] = []

    def intercept(self, fn: Interceptor) -> None:
        self._interceptors.append(fn)

    def put(self, sender: Side, frame: bytes) -> None:
        if self.closed:
            raise TransportClosed(f"transport {self.name!r} closed")
        frame = bytes(frame)
        for t in list(self._taps):
            t._record(sender, frame)
        frames = [frame]
        for fn in list(self._interceptors):
            frames = [out for f in frames for out in fn(sender, f)]
        for f in frames:
            self._deliver(sender, f)

    def _deliver(self, sender: Side, frame: bytes) -> None:
        with self._lock:
            if self.closed:
                raise TransportClosed(f"transport {self.name!r} closed")
            self._inbox[sender.other].append(bytes(frame))

    def get(self, receiver: Side) -> bytes | None:
        with self._lock:
            if self.closed:
                raise TransportClosed(f"transport {self.name!r} closed")
            box = self._inbox[receiver]
            return box.popleft() if box else None

    def pending(self, receiver: Side) -> int:
        with self._lock:
            return 0 if self.closed else len(self._inbox[receiver])

    def close(self) -> None:
        with self._lock:
            self.closed = True


class Tap:
    """Passive recorder on a transport that can re-inject captured frames."""

    def __init__(self, transport: Transport):
        self.transport = transport
        self.frames: list[tuple[Side, bytes]] = []
        self._lock = threading.Lock()
        transport._taps.append(self)

    def _record(self, sender: Side, frame: bytes) -> None:
        with self._lock:
            self.frames.append((sender, frame))

    def inject(self, index: int) -> None:
        sender, frame = self.frames[index]
        self.transport._deliver(sender, frame)

    def inject_raw(self, sender: Side, frame: bytes) -> None:
        self.transport._deliver(sender, frame)

    def detach(self) -> None:
        if self in self.transport._taps:
            self.transport._taps.remove(self)


class Bridge:
    """Splices two transports: ``t1``'s initiator talks to ``t2``'s responder.

    The responder end of ``t1`` and the initiator end of ``t2`` are cut out.
    Frames are forwarded verbatim, so each leg keeps its own keys.
    """

    def __init__(self, t1: Transport, t2: Transport):
        self.t1, self.t2 = t1, t2
        self.forwarded: list[tuple[str, bytes]] = []

        def from_t1(sender: Side, frame: bytes):
            if sender is Side.INITIATOR:
                self.forwarded.append(("t1->t2", frame))
                t2._deliver(Side.INITIATOR, frame)
                return []
            return [frame]

        def from_t2(sender: Side, frame: bytes):
            if sender is Side.RESPONDER:
                self.forwarded.append(("t2->t1", frame))
                t1._deliver(Side.RESPONDER, frame)
                return []
            return [frame]

        t1.intercept(from_t1)
        t2.intercept(from_t2)


def tap(transport: Transport) -> Tap:
    return Tap(transport)


def bridge(t1: Transport, t2: Transport) -> Bridge:
    return Bridge(t1, t2)


# -- configuration and handles -----------------------------------------------

@dataclass
class ChannelStats:
    mutual_auth: int = 0
    resumptions: int = 0
    records_software: int = 0
    records_offload: int = 0


@dataclass
class ChannelConfig:
    local_identity: HostIdentity
    signing_key: bytes
    trust_anchors: frozenset[bytes]
    rng_seed: int = 0
    stats: ChannelStats = field(default_factory=ChannelStats, compare=False)
    rng: random.Random = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if verify_key_of(self.signing_key) != self.local_identity.guard_pubkey:
            raise ValueError("signing key does not match local_identity.guard_pubkey")
        self.trust_anchors = frozenset(self.trust_anchors)
        self.rng = random.Random(self.rng_seed)

    def _ticket_key(self) -> bytes:
        return hkdf(self.signing_key[:32], b"", b"grimlock sim ticket key")


@dataclass(frozen=True)
class PeerContext:
    peer: HostIdentity
    resumption_secret: bytes = field(repr=False)
    created_at: int
    ticket: bytes = field(repr=False)
    local_host_id: str = ""


@dataclass(eq=False)
class ChannelHandle:
    channel_id: bytes
    role: Side
    peer: HostIdentity
    local: HostIdentity
    transcript_hash: Digest
    transport: Transport = field(repr=False)
    stats: ChannelStats = field(repr=False)
    _exporter_secret: bytes = field(repr=False)
    resumed: bool = False
    offload: bool = False
    established: bool = True
    _ticket: bytes = field(default=b"", repr=False)
    _send_seq: int = field(default=0, repr=False)
    _recv_seq: int = field(default=0, repr=False)

    def __post_init__(self):
        i2r = (b"i2r", self._exporter_secret)
        r2i = (b"r2i", self._exporter_secret)
        out, inc = (i2r, r2i) if self.role is Side.INITIATOR else (r2i, i2r)
        self._send_keys = _record_keys(*out)
        self._recv_keys = _record_keys(*inc)

    @property
    def closed(self) -> bool:
        return self.transport.closed

    def __repr__(self) -> str:
        return (f"ChannelHandle(id={self.channel_id.hex()}, role={self.role.value}, "
                f"peer={self.peer.host_id}, resumed={self.resumed}, offload={self.offload})")


def _record_keys(direction: bytes, secret: bytes) -> tuple[bytes, bytes]:
    return (hkdf_expand(secret, b"grimlock sim record enc " + direction, 32),
            hkdf_expand(secret, b"grimlock sim record mac " + direction, 32))


# -- handshake ---------------------------------------------------------------

def _x25519_keypair(rng: random.Random) -> tuple[X25519PrivateKey, bytes]:
    priv = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
    return priv, priv.public_key().public_bytes_raw()


def _exchange(priv: X25519PrivateKey, peer_pub: bytes) -> bytes:
    try:
        return priv.exchange(X25519PublicKey.from_public_bytes(peer_pub))
    except ValueError as exc:
        raise HandshakeAuthFailure(f"bad key share: {exc}") from None


def _hop(transport: Transport, sender: Side) -> bytes:
    msg = transport.get(sender.other)
    if msg is None:
        raise TransportClosed("handshake message lost in transit")
    return msg


def _channel_id(transcript_hash: bytes) -> bytes:
    return digest(b"grimlock sim channel id" + transcript_hash)[:16]


def establish(initiator_cfg: ChannelConfig, responder_cfg: ChannelConfig,
              transport: Transport) -> tuple[ChannelHandle, ChannelHandle]:
    """Full mutually authenticated handshake over ``transport``.

    Runs both endpoints in lock step; an adversary acts through the
    transport's interceptors. Raises HandshakeAuthFailure when either side
    sees an untrusted key or a bad transcript signature.
    """
    if transport.closed:
        raise TransportClosed("transport closed")
    I, R = Side.INITIATOR, Side.RESPONDER

    # initiator -> ClientHello
    i_rand = initiator_cfg.rng.randbytes(32)
    i_kx, i_kx_pub = _x25519_keypair(initiator_cfg.rng)
    ch = (bytes([_CH]) + i_rand + i_kx_pub + initiator_cfg.local_identity.guard_pubkey
          + lp16(initiator_cfg.local_identity.host_id))
    transport.put(I, ch)

    # responder: ClientHello -> ServerHello
    ch_r = _hop(transport, I)
    rd = Reader(ch_r, HandshakeAuthFailure)
    if rd.u8() != _CH:
        raise HandshakeAuthFailure("expected ClientHello")
    r_seen_i_rand, r_seen_i_kx, r_seen_i_key = rd.take(32), rd.take(32), rd.take(32)
    r_seen_i_host = rd.text()
    rd.expect_end()
    if r_seen_i_key not in responder_cfg.trust_anchors:
        raise HandshakeAuthFailure("initiator key not trusted by responder")
    r_rand = responder_cfg.rng.randbytes(32)
    r_kx, r_kx_pub = _x25519_keypair(responder_cfg.rng)
    sh_body = (bytes([_SH]) + r_rand + r_kx_pub + responder_cfg.local_identity.guard_pubkey
               + lp16(responder_cfg.local_identity.host_id))
    sh = sh_body + sign(responder_cfg.signing_key, digest(ch_r + sh_body))
    transport.put(R, sh)

    # initiator: verify ServerHello, send Finished
    sh_i = _hop(transport, R)
    rd = Reader(sh_i, HandshakeAuthFailure)
    if rd.u8() != _SH:
        raise HandshakeAuthFailure("expected ServerHello")
    i_seen_r_rand, i_seen_r_kx, i_seen_r_key = rd.take(32), rd.take(32), rd.take(32)
    i_seen_r_host = rd.text()
    r_sig = rd.take(64)
    rd.expect_end()
    if i_seen_r_key not in initiator_cfg.trust_anchors:
        raise HandshakeAuthFailure("responder key not trusted by initiator")
    if not verify(i_seen_r_key, digest(ch + sh_i[:-64]), r_sig):
        raise HandshakeAuthFailure("responder transcript signature invalid")
    cf = bytes([_CF]) + sign(initiator_cfg.signing_key, digest(ch + sh_i))
    transport.put(I, cf)

    # responder: verify Finished
    cf_r = _hop(transport, I)
    if len(cf_r) != 65 or cf_r[0] != _CF:
        raise HandshakeAuthFailure("malformed Finished")
    if not verify(r_seen_i_key, digest(ch_r + sh), cf_r[1:]):
        raise HandshakeAuthFailure("initiator transcript signature invalid")

    i_th = digest(ch + sh_i + cf)
    r_th = digest(ch_r + sh + cf_r)
    i_secret = hkdf(_exchange(i_kx, i_seen_r_kx), i_rand + i_seen_r_rand,
                    EXPORTER_MASTER_LABEL + i_th)
    r_secret = hkdf(_exchange(r_kx, r_seen_i_kx), r_seen_i_rand + r_rand,
                    EXPORTER_MASTER_LABEL + r_th)

    try:
        i_peer = HostIdentity(i_seen_r_host, i_seen_r_key)
        r_peer = HostIdentity(r_seen_i_host, r_seen_i_key)
    except ValueError as exc:
        raise HandshakeAuthFailure(str(exc)) from None

    # responder issues a stateless resumption ticket
    r_resumption = hkdf_expand(r_secret, RESUMPTION_LABEL, 32)
    ticket = _seal_ticket(responder_cfg, r_resumption, r_peer)
    transport.put(R, bytes([_NST]) + ticket)
    nst = _hop(transport, R)
    if not nst or nst[0] != _NST:
        raise HandshakeAuthFailure("expected NewSessionTicket")

    hi = ChannelHandle(_channel_id(i_th), I, i_peer, initiator_cfg.local_identity, i_th,
                       transport, initiator_cfg.stats, i_secret, _ticket=nst[1:])
    hr = ChannelHandle(_channel_id(r_th), R, r_peer, responder_cfg.local_identity, r_th,
                       transport, responder_cfg.stats, r_secret)
    initiator_cfg.stats.mutual_auth += 1
    responder_cfg.stats.mutual_auth += 1
    return hi, hr


def _seal_ticket(cfg: ChannelConfig, resumption_secret: bytes, peer: HostIdentity) -> bytes:
    nonce = cfg.rng.randbytes(12)
    body = resumption_secret + peer.encode()
    return nonce + AESGCM(cfg._ticket_key()).encrypt(nonce, body, cfg.local_identity.guard_pubkey)


def _open_ticket(cfg: ChannelConfig, ticket: bytes) -> tuple[bytes, HostIdentity]:
    if len(ticket) < 12 + 16:
        raise StalePeerContext("ticket too short")
    try:
        body = AESGCM(cfg._ticket_key()).decrypt(ticket[:12], ticket[12:],
                                                 cfg.local_identity.guard_pubkey)
        return body[:32], HostIdentity.decode(body[32:])
    except (InvalidTag, ValueError):
        raise StalePeerContext("ticket not issued by this peer key") from None


def peer_context(handle: ChannelHandle, now: int) -> PeerContext:
    """Cacheable peer authentication context from an initiator-side handle."""
    if handle.role is not Side.INITIATOR or not handle._ticket:
        raise NotEstablished("only initiator handles carry a resumption ticket")
    return PeerContext(handle.peer, hkdf_expand(handle._exporter_secret, RESUMPTION_LABEL, 32),
                       int(now), handle._ticket, handle.local.host_id)


def resume(cfg: ChannelConfig, ctx: PeerContext, responder_cfg: ChannelConfig,
           transport: Transport) -> tuple[ChannelHandle, ChannelHandle]:
    """Abbreviated handshake from a cached PeerContext (no signatures).

    Yields a fresh channel id and exporter secret; the mutual-auth counter
    is left untouched.
    """
    if transport.closed:
        raise TransportClosed("transport closed")
    if ctx.local_host_id and ctx.local_host_id != cfg.local_identity.host_id:
        raise StalePeerContext("peer context belongs to another local identity")
    I, R = Side.INITIATOR, Side.RESPONDER
    binder_key = hkdf_expand(ctx.resumption_secret, b"grimlock sim binder", 32)

    i_rand = cfg.rng.randbytes(32)
    i_kx, i_kx_pub = _x25519_keypair(cfg.rng)
    ch_body = bytes([_PSK_CH]) + i_rand + i_kx_pub + lp16(ctx.ticket)
    ch = ch_body + hmac.digest(binder_key, digest(ch_body), "sha256")
    transport.put(I, ch)

    ch_r = _hop(transport, I)
    rd = Reader(ch_r, StalePeerContext)
    if rd.u8() != _PSK_CH:
        raise HandshakeAuthFailure("expected resumption ClientHello")
    r_seen_rand, r_seen_kx, r_seen_ticket = rd.take(32), rd.take(32), rd.lp16()
    binder = rd.take(32)
    rd.expect_end()
    r_resumption, r_peer = _open_ticket(responder_cfg, r_seen_ticket)
    if r_peer.guard_pubkey not in responder_cfg.trust_anchors:
        raise StalePeerContext("ticket holder key no longer trusted")
    r_binder_key = hkdf_expand(r_resumption, b"grimlock sim binder", 32)
    if not hmac.compare_digest(binder, hmac.digest(r_binder_key, digest(ch_r[:-32]), "sha256")):
        raise HandshakeAuthFailure("resumption binder invalid")
    r_rand = responder_cfg.rng.randbytes(32)
    r_kx, r_kx_pub = _x25519_keypair(responder_cfg.rng)
    sh_body = bytes([_PSK_SH]) + r_rand + r_kx_pub + responder_cfg.local_identity.guard_pubkey
    sh = sh_body + hmac.digest(r_binder_key, digest(ch_r + sh_body), "sha256")
    transport.put(R, sh)

    sh_i = _hop(transport, R)
    rd = Reader(sh_i, HandshakeAuthFailure)
    if rd.u8() != _PSK_SH:
        raise HandshakeAuthFailure("expected resumption ServerHello")
    i_seen_rand, i_seen_kx, i_seen_key = rd.take(32), rd.take(32), rd.take(32)
    fin = rd.take(32)
    rd.expect_end()
    if i_seen_key != ctx.peer.guard_pubkey:
        raise StalePeerContext("peer key differs from the cached context")
    if not hmac.compare_digest(fin, hmac.digest(binder_key, digest(ch + sh_i[:-32]), "sha256")):
        raise HandshakeAuthFailure("resumption finished invalid")
    cf = bytes([_PSK_CF]) + hmac.digest(binder_key, digest(ch + sh_i), "sha256")
    transport.put(I, cf)

    cf_r = _hop(transport, I)
    if len(cf_r) != 33 or cf_r[0] != _PSK_CF or not hmac.compare_digest(
            cf_r[1:], hmac.digest(r_binder_key, digest(ch_r + sh), "sha256")):
        raise HandshakeAuthFailure("resumption client finished invalid")

    i_th = digest(ch + sh_i + cf)
    r_th = digest(ch_r + sh + cf_r)
    i_secret = hkdf(ctx.resumption_secret + _exchange(i_kx, i_seen_kx), i_rand + i_seen_rand,
                    RESUMED_MASTER_LABEL + i_th)
    r_secret = hkdf(r_resumption + _exchange(r_kx, r_seen_kx), r_seen_rand + r_rand,
                    RESUMED_MASTER_LABEL + r_th)
    hi = ChannelHandle(_channel_id(i_th), I, ctx.peer, cfg.local_identity, i_th, transport,
                       cfg.stats, i_secret, resumed=True, _ticket=ctx.ticket)
    hr = ChannelHandle(_channel_id(r_th), R, r_peer, responder_cfg.local_identity, r_th,
                       transport, responder_cfg.stats, r_secret, resumed=True)
    cfg.stats.resumptions += 1
    responder_cfg.stats.resumptions += 1
    return hi, hr


# -- exporter and records ----------------------------------------------------

def _require_live(handle: ChannelHandle) -> None:
    if not handle.established or handle.transport.closed:
        raise NotEstablished("channel is not established")


def exporter(handle: ChannelHandle, label: bytes, context: bytes, out_len: int) -> bytes:
    if out_len <= 0 or out_len > MAX_EXPORT_LEN:
        raise InvalidLength(f"exporter length {out_len} outside 1..{MAX_EXPORT_LEN}")
    _require_live(handle)
    return hkdf_expand(handle._exporter_secret, bytes(label) + digest(context), out_len)


def _ctr(key: bytes, seq: int, data: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.CTR(u64(seq) + bytes(8))).encryptor()
    return enc.update(data) + enc.finalize()


def _count(handle: ChannelHandle) -> None:
    if handle.offload:
        handle.stats.records_offload += 1
    else:
        handle.stats.records_software += 1


def send(handle: ChannelHandle, plaintext: bytes) -> None:
    _require_live(handle)
    enc_key, mac_key = handle._send_keys
    seq = handle._send_seq
    body = _ctr(enc_key, seq, bytes(plaintext))
    header = u64(seq) + u32(len(body))
    frame = header + body + hmac.digest(mac_key, header + body, "sha256")
    handle._send_seq += 1
    _count(handle)
    handle.transport.put(handle.role, frame)


def recv(handle: ChannelHandle) -> bytes | None:
    """Next plaintext record, or None when nothing is pending."""
    if handle.transport.closed:
        raise TransportClosed("transport closed")
    frame = handle.transport.get(handle.role)
    if frame is None:
        return None
    enc_key, mac_key = handle._recv_keys
    if len(frame) < RECORD_HEADER_LEN + MAC_LEN:
        raise RecordAuthFailure("short record")
    rd = Reader(frame, RecordAuthFailure)
    seq, length = rd.u64(), rd.u32()
    if length != len(frame) - RECORD_HEADER_LEN - MAC_LEN:
        raise RecordAuthFailure("record length mismatch")
    body = rd.take(length)
    tag = rd.take(MAC_LEN)
    if not hmac.compare_digest(tag, hmac.digest(mac_key, frame[:RECORD_HEADER_LEN + length], "sha256")):
        raise RecordAuthFailure("record MAC invalid")
    if seq != handle._recv_seq:
        raise RecordAuthFailure(f"unexpected sequence number {seq} (expected {handle._recv_seq})")
    handle._recv_seq += 1
    _count(handle)
    return _ctr(enc_key, seq, body)


def enable_offload(handle: ChannelHandle) -> None:
    _require_live(handle)
    handle.offload = True


def close(handle: ChannelHandle) -> None:
    handle.established = False
