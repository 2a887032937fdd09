"""Quantile-regression soft actor-critic with recurrent sequence replay."""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from egorace.neural import (GLOBAL_DIM, PROPRIO_DIM, Actor, NetConfig, Nets, adam_step_count,
                            deterministic_action, make_optimizers, polyak_update, sample_action)

IMAGE_SHAPE = (64, 64, 3)


@dataclass(frozen=True)
class LearnerConfig:
    gamma: float = 0.9896
    n_step: int = 7
    alpha: float = 0.01
    kappa: float = 1.0
    tau: float = 0.005
    lr: float = 2.5e-5
    batch_segments: int = 16
    burn_in: int = 16
    train_len: int = 32
    grad_steps: int = 25
    shift_pixels: int = 4
    reinit_epoch: int | None = None   # None: reinitialize when the buffer first fills
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_step < 1 or self.net.n_quantiles < 1:
            raise ValueError("n_step and n_quantiles must be >= 1")
        if self.kappa <= 0 or self.shift_pixels < 0:
            raise ValueError("kappa must be positive and shift_pixels non-negative")

    @property
    def seq_len(self) -> int:
        return self.burn_in + self.train_len + self.n_step


# -- augmentation -------------------------------------------------------------------

def random_shift(images: np.ndarray, max_shift: int, rng: np.random.Generator,
                 shifts: np.ndarray | None = None) -> np.ndarray:
    """Translate each (H, W, C) image by its own integer (dx, dy) in
    [-max_shift, max_shift]^2; uncovered pixels mirror the border."""
    if max_shift == 0:
        return images.copy()
    n, h, w, _ = images.shape
    if shifts is None:
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    p = max_shift
    # symmetric mirror: the border pixel itself is repeated first
    x = np.concatenate([images[:, :, p - 1::-1], images, images[:, :, :-p - 1:-1]], axis=2)
    x = np.concatenate([x[:, p - 1::-1], x, x[:, :-p - 1:-1]], axis=1)
    out = np.empty_like(images)
    # content moves by +dx columns / +dy rows, so the crop starts at p - shift
    for i, (dx, dy) in enumerate(shifts):
        r0, c0 = p - dy, p - dx
        out[i] = x[i, r0:r0 + h, c0:c0 + w]
    return out


# -- losses and targets ------------------------------------------------------------

def quantile_midpoints(n: int, dtype=torch.float32) -> torch.Tensor:
    return (torch.arange(n, dtype=dtype) + 0.5) / n


def quantile_huber_loss(pred: torch.Tensor, targets: torch.Tensor, kappa: float = 1.0) -> torch.Tensor:
    """pred (..., N) quantile estimates, targets (..., M) samples.

    Sums over quantiles, averages over target samples and leading dims.
    """
    N = pred.shape[-1]
    tau = quantile_midpoints(N, pred.dtype)
    u = targets.unsqueeze(-2) - pred.unsqueeze(-1)          # (..., N, M)
    abs_u = u.abs()
    huber = torch.where(abs_u <= kappa, 0.5 * u * u, kappa * (abs_u - 0.5 * kappa))
    weight = (tau[:, None] - (u.detach() < 0).to(pred.dtype)).abs()
    per = (weight * huber / kappa).sum(-2).mean(-1)
    return per.mean()


def n_step_target(rewards: torch.Tensor, dones: torch.Tensor, gamma: float,
                  boot_q: torch.Tensor, boot_logp: torch.Tensor, alpha: float,
                  lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Distributional n-step targets.

    rewards, dones: (B, n) starting at the trained step; ``lengths`` (B,)
    says how many of the n rewards exist before the episode's final
    observation (default n). A done at step k keeps r_k and drops the
    bootstrap. boot_q (B, N) and boot_logp (B,) belong to the state
    ``lengths`` steps ahead. Returns (B, N).
    """
    B, n = rewards.shape
    if lengths is None:
        lengths = torch.full((B,), n, dtype=torch.long)
    k = torch.arange(n)
    inside = k[None, :] < lengths[:, None]
    done_in = (dones.bool() & inside)
    # steps at or before the first done still count
    after_done = torch.cumsum(done_in.to(torch.long), dim=1) - done_in.to(torch.long) > 0
    use = inside & ~after_done
    disc = gamma ** k.to(rewards.dtype)
    ret = (rewards * disc * use.to(rewards.dtype)).sum(1)
    terminal = done_in.any(1)
    boot_disc = torch.where(terminal, torch.zeros_like(ret), gamma ** lengths.to(rewards.dtype))
    soft_v = boot_q - alpha * boot_logp[:, None]
    return ret[:, None] + boot_disc[:, None] * soft_v


# -- replay ----------------------------------------------------------------------------

@dataclass
class EpisodeData:
    """One committed episode: T actions and T + 1 observation rows."""
    images: np.ndarray      # (T+1, 64, 64, 3) uint8
    proprio: np.ndarray     # (T+1, 18) float32
    global_: np.ndarray | None  # (T+1, 615) float32
    hidden: np.ndarray      # (T+1, H) float32, state entering each row
    actions: np.ndarray     # (T, 2) float32, normalized
    rewards: np.ndarray     # (T,) float32
    terminal: bool          # true end of task (no bootstrap past the last row)

    @property
    def length(self) -> int:
        return len(self.actions)

    def validate(self, hidden_size: int, with_global: bool):
        T = self.length
        if T < 1:
            raise ValueError("episode has no steps")
        if self.images.shape != (T + 1, *IMAGE_SHAPE) or self.images.dtype != np.uint8:
            raise ValueError("bad image rows")
        if self.proprio.shape != (T + 1, PROPRIO_DIM) or self.rewards.shape != (T,):
            raise ValueError("bad proprio/reward rows")
        if self.hidden.shape != (T + 1, hidden_size):
            raise ValueError(f"stored hidden size {self.hidden.shape[-1]} != {hidden_size}")
        if with_global and (self.global_ is None or self.global_.shape != (T + 1, GLOBAL_DIM)):
            raise ValueError("bad global feature rows")


@dataclass
class SequenceLayout:
    rows: np.ndarray         # (B, L) ring indices
    valid: np.ndarray        # (B, L) row belongs to the segment's episode
    nstep_len: np.ndarray    # (B, train) rewards available for each trained step
    terminal_end: np.ndarray  # (B, train) the n-step window ends on a terminal row
    burn_in: int
    train_len: int

    @property
    def train_slice(self) -> slice:
        return slice(self.burn_in, self.burn_in + self.train_len)


@dataclass
class SequenceSample:
    layout: SequenceLayout
    images: np.ndarray
    proprio: np.ndarray
    global_: np.ndarray | None
    actions: np.ndarray
    rewards: np.ndarray
    h0: np.ndarray

    @property
    def training_steps(self) -> int:
        return int(self.layout.valid[:, self.layout.train_slice].sum())


class ReplayBuffer:
    """Ring of whole episodes with stored recurrent state.

    Episodes are written contiguously (wrapping), so the surviving rows of a
    partly overwritten episode are always its tail.
    """

    def __init__(self, capacity: int, hidden_size: int, with_global: bool = True,
                 burn_in: int = 16, train_len: int = 32, n_step: int = 7):
        if capacity < burn_in + train_len + n_step:
            raise ValueError("capacity smaller than one sequence")
        self.capacity = capacity
        self.hidden_size = hidden_size
        self.with_global = with_global
        self.burn_in, self.train_len, self.n_step = burn_in, train_len, n_step
        self.images = np.zeros((capacity, *IMAGE_SHAPE), dtype=np.uint8)
        self.proprio = np.zeros((capacity, PROPRIO_DIM), dtype=np.float32)
        self.global_ = np.zeros((capacity, GLOBAL_DIM), dtype=np.float32) if with_global else None
        self.hidden = np.zeros((capacity, hidden_size), dtype=np.float32)
        self.actions = np.zeros((capacity, 2), dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.ep_id = np.full(capacity, -1, dtype=np.int64)
        self.t = np.zeros(capacity, dtype=np.int64)
        self.ep_len = np.zeros(capacity, dtype=np.int64)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.start_ok = np.zeros(capacity, dtype=bool)
        self.ptr = 0
        self.rows_written = 0
        self.steps_committed = 0
        self.episodes_committed = 0

    @property
    def full(self) -> bool:
        return self.rows_written >= self.capacity

    @property
    def size(self) -> int:
        return min(self.rows_written, self.capacity)

    @property
    def fill(self) -> float:
        return self.size / self.capacity

    def n_valid_starts(self) -> int:
        return int(self.start_ok.sum())

    def add_episode(self, ep: EpisodeData) -> None:
        ep.validate(self.hidden_size, self.with_global)
        T = ep.length
        if T + 1 > self.capacity:
            raise ValueError("episode longer than the buffer")
        idx = (self.ptr + np.arange(T + 1)) % self.capacity
        self.images[idx] = ep.images
        self.proprio[idx] = ep.proprio
        if self.with_global:
            self.global_[idx] = ep.global_
        self.hidden[idx] = ep.hidden
        self.actions[idx[:T]] = ep.actions
        self.actions[idx[T]] = 0.0
        self.rewards[idx[:T]] = ep.rewards
        self.rewards[idx[T]] = 0.0
        self.ep_id[idx] = self.episodes_committed
        self.t[idx] = np.arange(T + 1)
        self.ep_len[idx] = T
        self.terminal[idx] = ep.terminal
        self.start_ok[idx] = np.arange(T + 1) + self.train_len <= T
        self.ptr = int((self.ptr + T + 1) % self.capacity)
        self.rows_written += T + 1
        self.steps_committed += T
        self.episodes_committed += 1

    def sample_layout(self, rng: np.random.Generator, batch: int = 16) -> SequenceLayout:
        starts = np.flatnonzero(self.start_ok)
        if len(starts) == 0:
            raise ValueError("replay buffer has no complete sequence to sample")
        s = starts[rng.integers(0, len(starts), size=batch)]
        offsets = np.arange(-self.burn_in, self.train_len + self.n_step)
        rows = (s[:, None] + offsets[None, :]) % self.capacity
        t0 = self.t[s]
        valid = (self.ep_id[rows] == self.ep_id[s][:, None]) & (self.t[rows] == t0[:, None] + offsets[None, :])
        T = self.ep_len[s]
        t_train = t0[:, None] + np.arange(self.train_len)[None, :]
        nlen = np.minimum(self.n_step, T[:, None] - t_train)
        term_end = self.terminal[s][:, None] & (t_train + nlen == T[:, None])
        return SequenceLayout(rows, valid, nlen, term_end, self.burn_in, self.train_len)

    def gather(self, layout: SequenceLayout, zero_hidden: bool = False) -> SequenceSample:
        rows = layout.rows
        first = np.argmax(layout.valid, axis=1)
        h0_rows = rows[np.arange(len(rows)), first]
        h0 = np.zeros((len(rows), self.hidden_size), np.float32) if zero_hidden else self.hidden[h0_rows]
        return SequenceSample(
            layout=layout,
            images=self.images[rows],
            proprio=self.proprio[rows],
            global_=self.global_[rows] if self.with_global else None,
            actions=self.actions[rows],
            rewards=self.rewards[rows],
            h0=h0,
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        arrays = [self.images, self.proprio, self.hidden, self.actions, self.rewards,
                  self.ep_id, self.t, self.ep_len, self.terminal, self.start_ok]
        if self.with_global:
            arrays.append(self.global_)
        for a in arrays:
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(np.array([self.ptr, self.rows_written, self.steps_committed], np.int64).tobytes())
        return h.hexdigest()


# -- acting ---------------------------------------------------------------------------

class ActingPolicy:
    """Batch-1 wrapper used by workers and evaluation."""

    def __init__(self, actor: Actor):
        self.actor = actor.eval()

    @property
    def hidden_size(self) -> int:
        return self.actor.cfg.hidden_size

    def initial_hidden(self) -> np.ndarray:
        return np.zeros(self.hidden_size, dtype=np.float32)

    @torch.no_grad()
    def act(self, image: np.ndarray, proprio: np.ndarray, h: np.ndarray,
            rng: np.random.Generator | None = None, deterministic: bool = False):
        """Returns (normalized action (2,), next hidden, pre-squash mean)."""
        out = self.actor(torch.from_numpy(image[None]), torch.from_numpy(proprio[None]),
                         torch.from_numpy(h[None]))
        if deterministic:
            a = deterministic_action(out.mean)
        else:
            noise = torch.from_numpy(rng.standard_normal(2).astype(np.float32))[None]
            a, _ = sample_action(out.mean, out.log_std, noise)
        return a[0].numpy().astype(np.float32), out.next_hidden[0].numpy(), out.mean[0].numpy()


# -- learner ----------------------------------------------------------------------------

def actor_loss(mean, log_std, noise, q_fn, alpha: float) -> torch.Tensor:
    """E[alpha * log pi(a|s) - mean_j min_i Q_i(s, a)_j] with reparameterized a."""
    a, logp = sample_action(mean, log_std, noise)
    q = q_fn(a)
    return (alpha * logp - q.mean(-1)).mean()


def burn_in_unroll(actor: Actor, images, proprio, h0, valid, burn_in: int):
    """Warm the hidden state over the burn-in rows without gradient and
    return the state entering the first training row."""
    if images.shape[1] < burn_in:
        raise ValueError("segment shorter than the burn-in")
    with torch.no_grad():
        _, _, hs = actor.unroll(images[:, :burn_in], proprio[:, :burn_in], h0, valid[:, :burn_in])
    return hs[:, -1]


class Learner:
    def __init__(self, config: LearnerConfig, buffer: ReplayBuffer):
        self.config = config
        self.buffer = buffer
        if buffer.with_global == config.net.symmetric_critic:
            raise ValueError("buffer must store global features iff the critic is asymmetric")
        self.nets = Nets(config.net, config.seed)
        self.actor_opt, self.critic_opt = make_optimizers(self.nets, config.lr)
        self.rng = np.random.default_rng(config.seed)
        self.gen = torch.Generator().manual_seed(config.seed)
        self.epoch = 0
        self.reinit_fired_at: int | None = None

    # -- pieces --------------------------------------------------------------
    def _q(self, critic, proprio, action, global_, embed):
        if self.config.net.symmetric_critic:
            return critic(proprio, action, image_embed=embed)
        return critic(proprio, action, global_)

    def _reinit_due(self) -> bool:
        if self.reinit_fired_at is not None:
            return False
        if self.config.reinit_epoch is not None:
            return self.epoch >= self.config.reinit_epoch
        return self.buffer.full

    def reinitialize(self):
        self.nets.reinitialize(self.config.seed + 7919 * (self.epoch + 1))
        self.actor_opt, self.critic_opt = make_optimizers(self.nets, self.config.lr)
        self.reinit_fired_at = self.epoch

    def train_step(self) -> dict:
        cfg = self.config
        nets = self.nets
        buf = self.buffer
        layout = buf.sample_layout(self.rng, cfg.batch_segments)
        s = buf.gather(layout, zero_hidden=cfg.net.zero_hidden_init)
        B, L = layout.rows.shape
        imgs = random_shift(s.images.reshape(B * L, *IMAGE_SHAPE), cfg.shift_pixels, self.rng)
        img = torch.from_numpy(imgs).reshape(B, L, *IMAGE_SHAPE).float().div_(255.0)
        prop = torch.from_numpy(s.proprio)
        glob = torch.from_numpy(s.global_) if s.global_ is not None else None
        valid = torch.from_numpy(layout.valid)
        acts = torch.from_numpy(s.actions)
        rew = torch.from_numpy(s.rewards)
        h0 = torch.from_numpy(s.h0)
        b, tr, n = cfg.burn_in, cfg.train_len, cfg.n_step
        t_sl = slice(b, b + tr)

        h = burn_in_unroll(nets.actor, img, prop, h0, valid, b)
        mean, log_std, hs = nets.actor.unroll(img[:, t_sl], prop[:, t_sl], h, valid[:, t_sl])
        with torch.no_grad():
            mean_la, log_std_la, _ = nets.actor.unroll(img[:, b + tr:], prop[:, b + tr:],
                                                       hs[:, -1], valid[:, b + tr:])
            mean_all = torch.cat([mean.detach(), mean_la], 1)      # rows b .. L-1
            log_std_all = torch.cat([log_std.detach(), log_std_la], 1)

            nlen = torch.from_numpy(layout.nstep_len)
            boot_off = torch.arange(tr)[None, :] + nlen                # offset from row b
            bi = boot_off.clamp(max=mean_all.shape[1] - 1)
            gather2 = lambda x, idx: torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[-1]))
            bm, bs = gather2(mean_all, bi), gather2(log_std_all, bi)
            noise = torch.randn(bm.shape, generator=self.gen)
            a_boot, logp_boot = sample_action(bm, bs, noise)
            rows_abs = bi + b
            bp = gather2(prop, rows_abs)
            bg = gather2(glob, rows_abs) if glob is not None else None
            if cfg.net.symmetric_critic:
                emb_t1 = gather2(nets.target1.embed(img), rows_abs)
                emb_t2 = gather2(nets.target2.embed(img), rows_abs)
            else:
                emb_t1 = emb_t2 = None
            q_boot = torch.minimum(self._q(nets.target1, bp, a_boot, bg, emb_t1),
                                   self._q(nets.target2, bp, a_boot, bg, emb_t2))
            # rewards of rows b+k .. b+k+n-1 for every trained row k
            r_win = rew[:, b:].unfold(1, n, 1)[:, :tr]                 # (B, tr, n)
            done_win = torch.zeros_like(r_win, dtype=torch.bool)
            term = torch.from_numpy(layout.terminal_end)
            last = (nlen - 1).clamp(min=0)
            done_win.scatter_(2, last[..., None], term[..., None])
            target = n_step_target(r_win.reshape(-1, n), done_win.reshape(-1, n), cfg.gamma,
                                   q_boot.reshape(B * tr, -1), logp_boot.reshape(-1), cfg.alpha,
                                   nlen.reshape(-1)).reshape(B, tr, -1)

        tp, ta = prop[:, t_sl], acts[:, t_sl]
        tg = glob[:, t_sl] if glob is not None else None
        if cfg.net.symmetric_critic:
            e1, e2 = nets.critic1.embed(img[:, t_sl]), nets.critic2.embed(img[:, t_sl])
        else:
            e1 = e2 = None
        q1 = self._q(nets.critic1, tp, ta, tg, e1)
        q2 = self._q(nets.critic2, tp, ta, tg, e2)
        critic_loss = (quantile_huber_loss(q1, target, cfg.kappa)
                       + quantile_huber_loss(q2, target, cfg.kappa))
        self.critic_opt.zero_grad(set_to_none=True)
        critic_loss.backward()
        critic_gn = torch.nn.utils.clip_grad_norm_(nets.critic_parameters(), float("inf"))
        self.critic_opt.step()

        for p in nets.critic_parameters():
            p.requires_grad_(False)
        if cfg.net.symmetric_critic:
            with torch.no_grad():
                e1, e2 = nets.critic1.embed(img[:, t_sl]), nets.critic2.embed(img[:, t_sl])
        noise = torch.randn(mean.shape, generator=self.gen)

        def q_fn(a):
            return torch.minimum(self._q(nets.critic1, tp, a, tg, e1), self._q(nets.critic2, tp, a, tg, e2))

        a_loss = actor_loss(mean, log_std, noise, q_fn, cfg.alpha)
        self.actor_opt.zero_grad(set_to_none=True)
        a_loss.backward()
        actor_gn = torch.nn.utils.clip_grad_norm_(nets.actor.parameters(), float("inf"))
        self.actor_opt.step()
        for p in nets.critic_parameters():
            p.requires_grad_(True)

        polyak_update(nets.target1, nets.critic1, cfg.tau)
        polyak_update(nets.target2, nets.critic2, cfg.tau)
        with torch.no_grad():
            _, logp = sample_action(mean, log_std, noise)
        return {
            "critic_loss": float(critic_loss.detach()), "actor_loss": float(a_loss.detach()),
            "entropy": float(-logp.mean()), "critic_grad_norm": float(critic_gn),
            "actor_grad_norm": float(actor_gn), "training_steps": s.training_steps,
        }

    def train_epoch(self) -> dict:
        """One epoch of gradient steps; returns averaged metrics."""
        if self.buffer.n_valid_starts() == 0:
            raise ValueError("replay buffer has no complete sequence to sample")
        t0 = time.perf_counter()
        self.epoch += 1
        fired = False
        if self._reinit_due():
            self.reinitialize()
            fired = True
        rows = [self.train_step() for _ in range(self.config.grad_steps)]
        out = {"epoch": self.epoch}
        for k in ("critic_loss", "actor_loss", "entropy", "critic_grad_norm", "actor_grad_norm"):
            out[k] = float(np.mean([r[k] for r in rows]))
        out.update({
            "buffer_fill": self.buffer.fill,
            "buffer_steps": self.buffer.steps_committed,
            "reinit_fired": fired,
            "adam_steps": adam_step_count(self.actor_opt),
            "wallclock": time.perf_counter() - t0,
        })
        return out

    def actor_snapshot(self) -> Actor:
        actor = Actor(self.config.net)
        actor.load_state_dict(self.nets.actor.state_dict())
        return actor.eval()
