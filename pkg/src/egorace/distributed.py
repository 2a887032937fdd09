"""Trainer / rollout-worker harness.

Workers own an environment each and act in lockstep with their current
policy snapshot; the trainer owns the learner and the replay buffer.
Pacing is credit based: a worker runs ``steps_per_epoch`` steps, then
waits for the next PolicyUpdate (or Shutdown). A received update is adopted
at the worker's next episode reset. Because of the credits, the data that
lands in the buffer does not depend on thread or process scheduling, and a
single in-process worker reproduces the monolithic loop exactly.

Wire frames: u32 little-endian length of (tag + payload), u8 tag, payload.
Every payload begins with a u16 version.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import multiprocessing as mp
import queue
import socket
import struct
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from egorace.env import OPPONENT_COUNTS, RaceConfig, RaceEnv, biai_policy
from egorace.neural import Actor, checkpoint_from_modules, decode_checkpoint, encode_checkpoint
from egorace.qrsac import ActingPolicy, EpisodeData, Learner, ReplayBuffer
from egorace.vehicle import MAX_DELTA_STEER_DEG, Action

log = logging.getLogger(__name__)

WIRE_VERSION = 1
TAG_POLICY, TAG_CHUNK, TAG_HELLO, TAG_SHUTDOWN = 1, 2, 3, 4

END_OPEN, END_TERMINAL, END_TRUNCATED, END_ABORTED = 0, 1, 2, 3

STEP_FIELDS = ("images", "proprio", "global_", "hidden", "actions", "rewards", "breakdown")
FINAL_FIELDS = ("images", "proprio", "global_", "hidden")


class WireError(ValueError):
    pass


class TruncatedFrame(WireError):
    pass


class UnknownTag(WireError):
    def __init__(self, tag: int):
        super().__init__(f"unknown message tag 0x{tag:02X}")
        self.tag = tag


class VersionMismatch(WireError):
    pass


class LinkClosed(ConnectionError):
    pass


# -- messages ---------------------------------------------------------------------

@dataclass
class PolicyUpdate:
    epoch: int
    checkpoint: bytes


@dataclass
class TrajectoryChunk:
    worker_id: int
    episode_id: int
    seq: int                 # index of the first step within its episode
    acting_epoch: int
    end: int                 # END_*
    steps_sent: int          # worker's cumulative step count including this chunk
    steps: dict[str, np.ndarray]
    final: dict[str, np.ndarray] | None = None

    @property
    def n_steps(self) -> int:
        return len(self.steps["actions"])


@dataclass
class WorkerHello:
    worker_id: int
    config_hash: str


@dataclass
class Shutdown:
    reason: str = ""


_DT_CODES = {np.dtype("uint8"): 0, np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}
_DT_FROM = {0: np.dtype("<u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}


def _put_arrays(buf: io.BytesIO, arrays: dict[str, np.ndarray] | None):
    if arrays is None:
        buf.write(struct.pack("<B", 0))
        return
    buf.write(struct.pack("<BB", 1, len(arrays)))
    for name, a in arrays.items():
        a = np.asarray(a)
        raw = name.encode()
        buf.write(struct.pack("<B", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _DT_CODES[a.dtype], a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype=_DT_FROM[_DT_CODES[a.dtype]]).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.view = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.view):
            raise TruncatedFrame("payload ends early")
        out = self.view[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def arrays(self) -> dict[str, np.ndarray] | None:
        (present,) = self.unpack("<B")
        if not present:
            return None
        (count,) = self.unpack("<B")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<B")
            name = bytes(self.take(nlen)).decode()
            code, ndim = self.unpack("<BB")
            if code not in _DT_FROM:
                raise WireError(f"unknown array dtype code {code}")
            shape = self.unpack(f"<{ndim}I")
            dt = _DT_FROM[code]
            n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            out[name] = np.frombuffer(self.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        return out


def encode(msg) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<H", WIRE_VERSION))
    if isinstance(msg, PolicyUpdate):
        tag = TAG_POLICY
        buf.write(struct.pack("<qQ", msg.epoch, len(msg.checkpoint)))
        buf.write(msg.checkpoint)
    elif isinstance(msg, TrajectoryChunk):
        tag = TAG_CHUNK
        buf.write(struct.pack("<iqqqBq", msg.worker_id, msg.episode_id, msg.seq, msg.acting_epoch,
                              msg.end, msg.steps_sent))
        _put_arrays(buf, msg.steps)
        _put_arrays(buf, msg.final)
    elif isinstance(msg, WorkerHello):
        tag = TAG_HELLO
        raw = msg.config_hash.encode()
        buf.write(struct.pack("<iH", msg.worker_id, len(raw)))
        buf.write(raw)
    elif isinstance(msg, Shutdown):
        tag = TAG_SHUTDOWN
        raw = msg.reason.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
    else:
        raise TypeError(f"not a wire message: {type(msg).__name__}")
    body = buf.getvalue()
    return struct.pack("<IB", len(body) + 1, tag) + body


def decode(frame: bytes):
    """Decode exactly one frame."""
    if len(frame) < 5:
        raise TruncatedFrame("frame shorter than its header")
    (length,) = struct.unpack("<I", frame[:4])
    if len(frame) < 4 + length:
        raise TruncatedFrame(f"frame declares {length} bytes, has {len(frame) - 4}")
    if len(frame) > 4 + length:
        raise WireError("trailing bytes after frame")
    tag = frame[4]
    if tag not in (TAG_POLICY, TAG_CHUNK, TAG_HELLO, TAG_SHUTDOWN):
        raise UnknownTag(tag)
    r = _Reader(frame[5:])
    (version,) = r.unpack("<H")
    if version != WIRE_VERSION:
        raise VersionMismatch(f"payload version {version}, expected {WIRE_VERSION}")
    if tag == TAG_POLICY:
        epoch, n = r.unpack("<qQ")
        msg = PolicyUpdate(epoch, bytes(r.take(n)))
    elif tag == TAG_CHUNK:
        wid, eid, seq, ep, end, sent = r.unpack("<iqqqBq")
        steps = r.arrays()
        final = r.arrays()
        msg = TrajectoryChunk(wid, eid, seq, ep, end, sent, steps, final)
    elif tag == TAG_HELLO:
        wid, n = r.unpack("<iH")
        msg = WorkerHello(wid, bytes(r.take(n)).decode())
    else:
        (n,) = r.unpack("<H")
        msg = Shutdown(bytes(r.take(n)).decode())
    if r.pos != len(r.view):
        raise WireError("payload longer than its message")
    return msg


# -- links ---------------------------------------------------------------------------

class QueueLink:
    """One end of an in-process duplex channel. Carries encoded frames so both
    transports exercise the same codec."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self.inbox, self.outbox = inbox, outbox
        self.closed = False

    def send(self, msg):
        if self.closed:
            raise LinkClosed("link closed")
        self.outbox.put(encode(msg))

    def recv(self, timeout: float | None = None):
        try:
            frame = self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None
        if frame is None:
            raise LinkClosed("peer closed")
        return decode(frame)

    def close(self):
        if not self.closed:
            self.closed = True
            self.outbox.put(None)


def queue_pair() -> tuple[QueueLink, QueueLink]:
    a, b = queue.Queue(), queue.Queue()
    return QueueLink(a, b), QueueLink(b, a)


class SocketLink:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, msg):
        try:
            self.sock.sendall(encode(msg))
        except OSError as exc:
            raise LinkClosed(str(exc)) from exc

    def _exact(self, n: int) -> bytes:
        parts, got = [], 0
        while got < n:
            part = self.sock.recv(min(n - got, 1 << 20))
            if not part:
                raise LinkClosed("peer closed")
            parts.append(part)
            got += len(part)
        return b"".join(parts)

    def recv(self, timeout: float | None = None):
        self.sock.settimeout(timeout)
        try:
            head = self._exact(4)
        except socket.timeout:
            return None
        finally:
            self.sock.settimeout(None)
        (length,) = struct.unpack("<I", head)
        return decode(head + self._exact(length))

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def connect(address: tuple[str, int], retries: int = 50, delay: float = 0.1) -> SocketLink:
    last = None
    for _ in range(retries):
        try:
            return SocketLink(socket.create_connection(address))
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise LinkClosed(f"could not reach trainer at {address}: {last}")


# -- rollout ------------------------------------------------------------------------

@dataclass(frozen=True)
class RolloutConfig:
    """What a worker needs to build its races."""
    track: str = "oval"
    laps: int = 1
    start_mode: str = "random_scatter"
    bop_range: float = 0.25
    bop_enabled: bool = True
    max_steps: int | None = 400
    # (first epoch, opponent counts) phases; a worker follows the epoch of its policy
    curriculum: tuple = ((0, (0,)),)
    with_global: bool = True
    seed: int = 0
    # guided exploration: before guide_epochs, this fraction of episodes is
    # driven by the scripted controller plus Gaussian noise (off-policy data)
    guide_epochs: int = 0
    guide_fraction: float = 0.0
    guide_noise: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.guide_fraction <= 1.0 or self.guide_noise < 0:
            raise ValueError("guide_fraction must lie in [0, 1] and guide_noise must be non-negative")
        for _, counts in self.curriculum:
            if not counts or any(c not in OPPONENT_COUNTS for c in counts):
                raise ValueError(f"opponent counts must come from {OPPONENT_COUNTS}")

    def opponent_counts(self, epoch: int) -> tuple:
        counts = self.curriculum[0][1]
        for start, c in self.curriculum:
            if epoch >= start:
                counts = c
        return tuple(counts)


def config_hash(rollout: RolloutConfig, net_cfg) -> str:
    blob = json.dumps({"rollout": asdict(rollout), "net": asdict(net_cfg)}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def actor_checkpoint_bytes(actor: Actor, epoch: int) -> bytes:
    return encode_checkpoint(checkpoint_from_modules(epoch, actor.cfg, {"actor": actor}))


def policy_from_bytes(data: bytes) -> tuple[int, ActingPolicy]:
    ckpt = decode_checkpoint(data)
    return ckpt.epoch, ActingPolicy(ckpt.build_actor())


class RolloutWorker:
    """Lockstep actor: steps its environment with the current snapshot and
    emits TrajectoryChunks."""

    def __init__(self, worker_id: int, rollout: RolloutConfig, chunk_size: int = 64):
        self.worker_id = worker_id
        self.rollout = rollout
        self.chunk_size = chunk_size
        ss = np.random.SeedSequence([rollout.seed, worker_id])
        scen_ss, act_ss = ss.spawn(2)
        self.scenario_rng = np.random.default_rng(scen_ss)
        self.action_rng = np.random.default_rng(act_ss)
        self.env = RaceEnv(RaceConfig(track=rollout.track, laps=rollout.laps, max_steps=rollout.max_steps))
        self.policy: ActingPolicy | None = None
        self.epoch = -1
        self.pending: tuple[int, ActingPolicy] | None = None
        self.episode_id = -1
        self.steps_sent = 0
        self._obs = None
        self._h = None
        self._t = 0
        self._rows: list[dict] = []
        self._seq = 0
        self._guided = False

    def offer(self, epoch: int, policy: ActingPolicy):
        """Queue a policy; it takes over at the next episode reset."""
        if self.policy is None:
            self.epoch, self.policy = epoch, policy
        else:
            self.pending = (epoch, policy)

    def _begin_episode(self):
        if self.pending is not None:
            self.epoch, self.policy = self.pending
            self.pending = None
        counts = self.rollout.opponent_counts(self.epoch)
        n_opp = int(counts[self.scenario_rng.integers(len(counts))])
        seed = int(self.scenario_rng.integers(0, 2 ** 63 - 1))
        r = self.rollout
        cfg = RaceConfig(track=r.track, n_opponents=n_opp, laps=r.laps, start_mode=r.start_mode,
                         bop_range=r.bop_range, bop_enabled=r.bop_enabled, seed=seed, max_steps=r.max_steps)
        self._guided = (r.guide_epochs > 0 and self.epoch < r.guide_epochs
                        and self.scenario_rng.random() < r.guide_fraction)
        self._obs = self.env.reset(cfg)
        self._h = self.policy.initial_hidden()
        self.episode_id += 1
        self._t = 0
        self._seq = 0
        self._rows = []

    def _obs_row(self, obs, h) -> dict:
        row = {"images": np.round(obs.image * 255.0).astype(np.uint8),
               "proprio": obs.proprio.astype(np.float32),
               "hidden": np.asarray(h, np.float32)}
        if self.rollout.with_global:
            row["global_"] = obs.global_features.astype(np.float32)
        return row

    def _chunk(self, end: int, final_row: dict | None) -> TrajectoryChunk:
        rows = self._rows
        keys = [k for k in STEP_FIELDS if not (k == "global_" and not self.rollout.with_global)]
        steps = {k: np.stack([r[k] for r in rows]) if rows else _empty(k, self.policy.hidden_size)
                 for k in keys}
        final = None
        if final_row is not None:
            final = {k: final_row[k][None] for k in FINAL_FIELDS if k in final_row}
        self.steps_sent += len(rows)
        chunk = TrajectoryChunk(self.worker_id, self.episode_id, self._seq, self.epoch, end,
                                self.steps_sent, steps, final)
        self._seq += len(rows)
        self._rows = []
        return chunk

    def collect(self, n_steps: int) -> list[TrajectoryChunk]:
        """Advance exactly ``n_steps`` environment steps."""
        if self.policy is None:
            raise RuntimeError("worker has no policy")
        out = []
        for _ in range(n_steps):
            if self._obs is None:
                self._begin_episode()
            obs, h = self._obs, self._h
            if self._guided:
                # the actor still carries its hidden state over the guided trajectory
                _, h_next, _ = self.policy.act(obs.image, obs.proprio, h, deterministic=True)
                a = self._guide_action()
            else:
                a, h_next, _ = self.policy.act(obs.image, obs.proprio, h, self.action_rng)
            next_obs, reward, done, info = self.env.step(Action.from_normalized(a))
            row = self._obs_row(obs, h)
            row["actions"] = a.astype(np.float32)
            row["rewards"] = np.float32(reward.total)
            row["breakdown"] = np.array(list(reward.terms().values()), np.float32)
            self._rows.append(row)
            self._t += 1
            self._obs, self._h = next_obs, h_next
            if done:
                end = END_TERMINAL if info.finished else END_TRUNCATED
                out.append(self._chunk(end, self._obs_row(next_obs, h_next)))
                self._obs = None
            elif len(self._rows) >= self.chunk_size:
                out.append(self._chunk(END_OPEN, None))
        if self._rows:
            out.append(self._chunk(END_OPEN, None))
        return out

    def _guide_action(self) -> np.ndarray:
        env = self.env
        b = biai_policy(env.states[0], env.track, env.specs[0])
        a = np.array([b.delta_steer / MAX_DELTA_STEER_DEG, b.throttle_brake])
        a = a + self.rollout.guide_noise * self.action_rng.standard_normal(2)
        lim = 1.0 - 1e-6
        return np.clip(a, -lim, lim).astype(np.float32)

    def abort(self) -> TrajectoryChunk | None:
        """Close the running episode (if any) with an aborted marker."""
        if self._obs is None:
            return None
        self._obs = None
        return self._chunk(END_ABORTED, None)


def _empty(key: str, hidden: int) -> np.ndarray:
    shapes = {"images": ((0, 64, 64, 3), np.uint8), "proprio": ((0, 18), np.float32),
              "global_": ((0, 615), np.float32), "hidden": ((0, hidden), np.float32),
              "actions": ((0, 2), np.float32), "rewards": ((0,), np.float32),
              "breakdown": ((0, 8), np.float32)}
    shape, dt = shapes[key]
    return np.zeros(shape, dt)


def run_worker(worker_id: int, rollout: RolloutConfig, link, cfg_hash: str, steps_per_epoch: int,
               chunk_size: int = 64, max_wait: float = 600.0) -> int:
    """Worker main loop. Returns the number of steps sent."""
    torch.set_num_threads(1)
    worker = RolloutWorker(worker_id, rollout, chunk_size)
    link.send(WorkerHello(worker_id, cfg_hash))
    while True:
        msg = link.recv(timeout=max_wait)
        if msg is None:
            raise LinkClosed(f"worker {worker_id}: no message from trainer within {max_wait}s")
        if isinstance(msg, Shutdown):
            chunk = worker.abort()
            if chunk is not None:
                link.send(chunk)
            link.close()
            return worker.steps_sent
        if isinstance(msg, PolicyUpdate):
            epoch, policy = policy_from_bytes(msg.checkpoint)
            worker.offer(epoch, policy)
            for chunk in worker.collect(steps_per_epoch):
                link.send(chunk)
        else:
            log.warning("worker %d ignoring %s", worker_id, type(msg).__name__)


def _socket_worker_main(address, worker_id, rollout, cfg_hash, steps_per_epoch, chunk_size):
    logging.basicConfig(level=logging.WARNING)
    link = connect(address)
    try:
        run_worker(worker_id, rollout, link, cfg_hash, steps_per_epoch, chunk_size)
    except LinkClosed as exc:
        log.error("worker %d lost its link: %s", worker_id, exc)
        raise SystemExit(2)


# -- trainer-side ingest ------------------------------------------------------------------

class ConfigMismatch(RuntimeError):
    pass


@dataclass
class IngestStats:
    steps_received: int = 0
    steps_committed: int = 0
    steps_dropped: int = 0
    episodes_committed: int = 0
    episodes_dropped: int = 0
    episodes_aborted: int = 0
    max_epoch_lag: int = 0
    sent_by_worker: dict = field(default_factory=dict)
    received_by_worker: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    def audit(self) -> dict:
        """Per worker: steps the worker reports sending minus steps received."""
        return {w: self.sent_by_worker[w] - self.received_by_worker.get(w, 0) for w in self.sent_by_worker}


class Ingest:
    """Stages chunks per episode; whole episodes are committed in a fixed order."""

    def __init__(self, buffer: ReplayBuffer):
        self.buffer = buffer
        self.staged: dict[tuple[int, int], list[TrajectoryChunk]] = {}
        self.ready: list[tuple[tuple[int, int], EpisodeData]] = []
        self.broken: set[tuple[int, int]] = set()
        self.stats = IngestStats()

    def receive(self, chunk: TrajectoryChunk, current_epoch: int):
        st = self.stats
        key = (chunk.worker_id, chunk.episode_id)
        n = chunk.n_steps
        st.steps_received += n
        st.received_by_worker[chunk.worker_id] = st.received_by_worker.get(chunk.worker_id, 0) + n
        st.sent_by_worker[chunk.worker_id] = chunk.steps_sent
        st.max_epoch_lag = max(st.max_epoch_lag, current_epoch - chunk.acting_epoch)
        if key in self.broken:
            st.steps_dropped += n
            return
        parts = self.staged.setdefault(key, [])
        expected = sum(c.n_steps for c in parts)
        if chunk.seq != expected:
            self._drop(key, f"episode {key}: chunk seq {chunk.seq}, expected {expected}")
            st.steps_dropped += n
            return
        parts.append(chunk)
        if chunk.end == END_ABORTED:
            st.episodes_aborted += 1
            self._drop(key, None)
        elif chunk.end in (END_TERMINAL, END_TRUNCATED):
            try:
                ep = self._assemble(parts)
                ep.validate(self.buffer.hidden_size, self.buffer.with_global)
            except (ValueError, KeyError) as exc:
                self._drop(key, f"episode {key}: malformed ({exc})")
                return
            del self.staged[key]
            self.ready.append((key, ep))

    def _drop(self, key, reason):
        parts = self.staged.pop(key, [])
        self.stats.steps_dropped += sum(c.n_steps for c in parts)
        if reason:
            self.stats.episodes_dropped += 1
            self.stats.errors.append(reason)
            log.warning("dropping %s", reason)
        self.broken.add(key)

    def _assemble(self, parts: list[TrajectoryChunk]) -> EpisodeData:
        cat = lambda k: np.concatenate([p.steps[k] for p in parts])
        final = parts[-1].final
        if final is None:
            raise ValueError("finished episode without a final observation")
        obs = lambda k: np.concatenate([cat(k), final[k]]) if k in final else None
        return EpisodeData(images=obs("images"), proprio=obs("proprio"), global_=obs("global_"),
                           hidden=obs("hidden"), actions=cat("actions"), rewards=cat("rewards"),
                           terminal=parts[-1].end == END_TERMINAL)

    def commit(self) -> int:
        """Commit every finished episode, ordered by (worker id, episode id)."""
        n = 0
        for key, ep in sorted(self.ready, key=lambda kv: kv[0]):
            self.buffer.add_episode(ep)
            self.stats.steps_committed += ep.length
            self.stats.episodes_committed += 1
            n += 1
        self.ready = []
        return n


# -- trainer ----------------------------------------------------------------------------

@dataclass(frozen=True)
class HarnessConfig:
    n_workers: int = 2
    transport: str = "inproc"          # inproc | socket
    steps_per_epoch: int = 64          # per worker
    chunk_size: int = 64
    host: str = "127.0.0.1"
    port: int = 0
    heartbeat: float = 30.0

    def __post_init__(self):
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        if self.transport not in ("inproc", "socket"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.steps_per_epoch < 1 or self.chunk_size < 1:
            raise ValueError("steps_per_epoch and chunk_size must be >= 1")


class Trainer:
    """Owns the learner and buffer; drives epochs over a set of links."""

    def __init__(self, learner: Learner, rollout: RolloutConfig, harness: HarnessConfig,
                 on_epoch=None):
        self.learner = learner
        self.rollout = rollout
        self.harness = harness
        self.ingest = Ingest(learner.buffer)
        self.cfg_hash = config_hash(rollout, learner.config.net)
        self.on_epoch = on_epoch
        self.links: dict[int, object] = {}
        self.updates_sent: dict[int, int] = {}

    def accept(self, links):
        for link in links:
            msg = self._recv(link, "hello")
            if not isinstance(msg, WorkerHello):
                raise RuntimeError(f"expected WorkerHello, got {type(msg).__name__}")
            if msg.config_hash != self.cfg_hash:
                link.send(Shutdown("config hash mismatch"))
                log.error("rejecting worker %d: config hash %s != %s", msg.worker_id,
                          msg.config_hash, self.cfg_hash)
                continue
            self.links[msg.worker_id] = link
            self.updates_sent[msg.worker_id] = 0
        if not self.links:
            raise RuntimeError("no worker connected")

    def _recv(self, link, what: str):
        waited = 0.0
        while True:
            msg = link.recv(timeout=self.harness.heartbeat)
            if msg is not None:
                return msg
            waited += self.harness.heartbeat
            log.warning("still waiting for %s after %.0fs", what, waited)

    def broadcast(self, msg):
        for wid in sorted(self.links):
            self.links[wid].send(msg)
            if isinstance(msg, PolicyUpdate):
                self.updates_sent[wid] += 1

    def _gather_epoch(self, epoch: int):
        # each worker sends exactly steps_per_epoch steps per update
        for wid in sorted(self.links):
            got = 0
            while got < self.harness.steps_per_epoch:
                msg = self._recv(self.links[wid], f"worker {wid} data")
                if not isinstance(msg, TrajectoryChunk):
                    raise RuntimeError(f"unexpected {type(msg).__name__} from worker {wid}")
                self.ingest.receive(msg, epoch)
                got += msg.n_steps

    def run(self, epochs: int) -> list[dict]:
        learner = self.learner
        metrics = []
        self.broadcast(PolicyUpdate(learner.epoch, actor_checkpoint_bytes(learner.nets.actor, learner.epoch)))
        try:
            for _ in range(epochs):
                self._gather_epoch(learner.epoch)
                self.ingest.commit()
                m = train_or_skip(learner)
                m["steps_received"] = self.ingest.stats.steps_received
                metrics.append(m)
                if self.on_epoch is not None:
                    self.on_epoch(learner, m)
                if len(metrics) < epochs:
                    self.broadcast(PolicyUpdate(learner.epoch,
                                                actor_checkpoint_bytes(learner.nets.actor, learner.epoch)))
        except KeyboardInterrupt:
            # workers still get told to stop so their partial episodes are flushed
            self.shutdown("interrupted")
            raise
        self.shutdown()
        return metrics

    def shutdown(self, reason: str = "training complete"):
        self.broadcast(Shutdown(reason))
        for wid in sorted(self.links):
            link = self.links[wid]
            while True:
                try:
                    msg = link.recv(timeout=self.harness.heartbeat)
                except LinkClosed:
                    break
                if msg is None:
                    log.warning("worker %d did not close its link", wid)
                    break
                if isinstance(msg, TrajectoryChunk):
                    self.ingest.receive(msg, self.learner.epoch)
            link.close()


def train_or_skip(learner: Learner) -> dict:
    """Train one epoch, or record an idle epoch while no sequence is ready."""
    if learner.buffer.n_valid_starts() == 0:
        learner.epoch += 1
        return {"epoch": learner.epoch, "critic_loss": None, "actor_loss": None, "entropy": None,
                "critic_grad_norm": None, "actor_grad_norm": None,
                "buffer_fill": learner.buffer.fill, "buffer_steps": learner.buffer.steps_committed,
                "reinit_fired": False, "adam_steps": 0, "wallclock": 0.0}
    return learner.train_epoch()


def run_inproc(learner: Learner, rollout: RolloutConfig, harness: HarnessConfig, epochs: int,
               on_epoch=None) -> Trainer:
    trainer = Trainer(learner, rollout, harness, on_epoch)
    threads, ends = [], []
    for wid in range(harness.n_workers):
        t_end, w_end = queue_pair()
        th = threading.Thread(target=run_worker, daemon=True,
                              args=(wid, rollout, w_end, trainer.cfg_hash, harness.steps_per_epoch,
                                    harness.chunk_size))
        th.start()
        threads.append(th)
        ends.append(t_end)
    trainer.accept(ends)
    trainer.run(epochs)
    for th in threads:
        th.join(timeout=60)
    return trainer


def run_sockets(learner: Learner, rollout: RolloutConfig, harness: HarnessConfig, epochs: int,
                on_epoch=None) -> Trainer:
    trainer = Trainer(learner, rollout, harness, on_epoch)
    server = socket.create_server((harness.host, harness.port))
    address = server.getsockname()[:2]
    ctx = mp.get_context("spawn")
    procs = [ctx.Process(target=_socket_worker_main,
                         args=(address, wid, rollout, trainer.cfg_hash, harness.steps_per_epoch,
                               harness.chunk_size))
             for wid in range(harness.n_workers)]
    for p in procs:
        p.start()
    try:
        server.settimeout(120.0)
        links = [SocketLink(server.accept()[0]) for _ in procs]
        trainer.accept(links)
        trainer.run(epochs)
    finally:
        server.close()
        for p in procs:
            p.join(timeout=60)
            if p.is_alive():
                p.terminate()
    return trainer


def run_monolithic(learner: Learner, rollout: RolloutConfig, steps_per_epoch: int, epochs: int,
                   chunk_size: int = 64, on_epoch=None) -> Ingest:
    """Same pacing as one worker, without any transport."""
    ingest = Ingest(learner.buffer)
    worker = RolloutWorker(0, rollout, chunk_size)
    snapshot = lambda: policy_from_bytes(actor_checkpoint_bytes(learner.nets.actor, learner.epoch))
    worker.offer(*snapshot())
    for e in range(epochs):
        for chunk in worker.collect(steps_per_epoch):
            ingest.receive(chunk, learner.epoch)
        ingest.commit()
        m = train_or_skip(learner)
        if on_epoch is not None:
            on_epoch(learner, m)
        if e + 1 < epochs:
            worker.offer(*snapshot())
    return ingest
