"""Actor and quantile critics.

The actor only sees what a driver sees: the ego image and its own
proprioception, carried through time by a GRU. The critics are trained with
privileged global features (track points and the opponent grid) and never
look at pixels, unless the symmetric ablation is switched on.

Gradients come from torch autograd; ``gradcheck`` style tests run the same
modules in float64 (``net.double()``).
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

IMAGE_SHAPE = (64, 64, 3)
PROPRIO_DIM = 18
GLOBAL_DIM = 177 * 3 + 6 * 14
ACTION_DIM = 2
LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
CONV_SPEC = ((32, 8, 4), (64, 4, 2), (64, 3, 1))

# per-entry input scales, so every feature is O(1) at racing speeds
_PROPRIO_SCALE = (
    [1 / 20.0] * 3 + [1 / 10.0] * 3 + [1.0] * 3
    + [1 / 0.5, 1.0, 1.0] + [1 / 0.5] * 3 + [1 / math.radians(3.0)] * 3
)
_GRID_SCALE = [1 / 50.0, 1 / 50.0, 1 / 10.0, 1 / 10.0, 1 / 10.0, 1 / 10.0]
_GLOBAL_SCALE = [1 / 100.0] * (177 * 3) + _GRID_SCALE * 14


@dataclass(frozen=True)
class NetConfig:
    hidden_size: int = 512
    embed_dim: int = 512
    mlp_width: int = 2048
    mlp_depth: int = 4
    n_quantiles: int = 32
    symmetric_critic: bool = False
    no_rnn: bool = False
    zero_hidden_init: bool = False

    def __post_init__(self):
        for f in ("hidden_size", "embed_dim", "mlp_width", "mlp_depth", "n_quantiles"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")

    @property
    def ablation_bits(self) -> int:
        return int(self.symmetric_critic) | int(self.no_rnn) << 1 | int(self.zero_hidden_init) << 2

    @property
    def ablations(self) -> list[str]:
        return [name for name in ABLATIONS if getattr(self, name)]


ABLATIONS = ("symmetric_critic", "no_rnn", "zero_hidden_init")


def conv_output_size(size: int = IMAGE_SHAPE[0]) -> list[int]:
    out = []
    for _, k, s in CONV_SPEC:
        size = (size - k) // s + 1
        out.append(size)
    return out


def _mlp(in_dim: int, width: int, depth: int) -> nn.Sequential:
    layers = []
    for _ in range(depth):
        layers += [nn.Linear(in_dim, width), nn.ReLU()]
        in_dim = width
    return nn.Sequential(*layers)


def _fan_in_uniform(w: torch.Tensor, gain: float = math.sqrt(2.0)):
    fan_in = w[0].numel()
    bound = gain * math.sqrt(3.0 / fan_in)
    with torch.no_grad():
        w.uniform_(-bound, bound)


def init_module(module: nn.Module):
    """Fan-in uniform for dense/conv, orthogonal GRU recurrence, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            _fan_in_uniform(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GRUCell):
            _fan_in_uniform(m.weight_ih, gain=1.0)
            H = m.hidden_size
            for g in range(3):
                nn.init.orthogonal_(m.weight_hh[g * H:(g + 1) * H])
            nn.init.zeros_(m.bias_ih)
            nn.init.zeros_(m.bias_hh)


class ConvEncoder(nn.Module):
    """64x64x3 image -> embed_dim vector."""

    def __init__(self, embed_dim: int = 512):
        super().__init__()
        convs, c_in = [], IMAGE_SHAPE[2]
        for c_out, k, s in CONV_SPEC:
            convs.append(nn.Conv2d(c_in, c_out, k, s))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        side = conv_output_size()[-1]
        self.fc = nn.Linear(c_in * side * side, embed_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-3:] != IMAGE_SHAPE:
            raise ValueError(f"expected (..., 64, 64, 3) images, got {tuple(image.shape)}")
        lead = image.shape[:-3]
        x = image.reshape(-1, *IMAGE_SHAPE).permute(0, 3, 1, 2)
        for conv in self.convs:
            x = F.relu(conv(x))
        x = F.relu(self.fc(x.flatten(1)))
        return x.reshape(*lead, -1)


@dataclass
class ActorOutput:
    mean: torch.Tensor     # pre-squash mean
    log_std: torch.Tensor
    next_hidden: torch.Tensor


class Actor(nn.Module):
    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConvEncoder(cfg.embed_dim)
        in_dim = cfg.embed_dim + PROPRIO_DIM
        if cfg.no_rnn:
            self.gru = None
            trunk_in = in_dim
        else:
            self.gru = nn.GRUCell(in_dim, cfg.hidden_size)
            trunk_in = cfg.hidden_size
        self.trunk = _mlp(trunk_in, cfg.mlp_width, cfg.mlp_depth)
        self.head = nn.Linear(cfg.mlp_width, 2 * ACTION_DIM)
        self.register_buffer("proprio_scale", torch.tensor(_PROPRIO_SCALE), persistent=False)
        self.reset_parameters()
        expected = actor_param_count(cfg)
        assert self.param_count() == expected, (self.param_count(), expected)

    def reset_parameters(self):
        init_module(self)
        with torch.no_grad():
            self.head.weight.mul_(0.01)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def initial_hidden(self, batch: int = 1) -> torch.Tensor:
        return torch.zeros(batch, self.cfg.hidden_size, dtype=self.head.weight.dtype)

    def features(self, image: torch.Tensor, proprio: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.encoder(image), proprio * self.proprio_scale], dim=-1)

    def core(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if self.gru is None:
            return h
        return self.gru(x, h)

    def head_out(self, x: torch.Tensor, h_next: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = x if self.gru is None else h_next
        out = self.head(self.trunk(z))
        mean, log_std = out.split(ACTION_DIM, dim=-1)
        return mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    def forward(self, image, proprio, h) -> ActorOutput:
        x = self.features(image, proprio)
        h_next = self.core(x, h)
        mean, log_std = self.head_out(x, h_next)
        return ActorOutput(mean, log_std, h_next)

    def unroll(self, images, proprio, h0, mask=None):
        """Run over (B, T, ...) inputs. Rows where ``mask`` is false leave the
        hidden state untouched. Returns mean, log_std (B, T, 2) and the hidden
        state entering every row, (B, T + 1, H)."""
        x = self.features(images, proprio)
        T = x.shape[1]
        h = h0
        hs = [h]
        outs = []
        for t in range(T):
            h_new = self.core(x[:, t], h)
            if mask is not None:
                h_new = torch.where(mask[:, t, None], h_new, h)
            outs.append(h_new if self.gru is not None else x[:, t])
            h = h_new
            hs.append(h)
        z = torch.stack(outs, dim=1)
        out = self.head(self.trunk(z))
        mean, log_std = out.split(ACTION_DIM, dim=-1)
        return mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX), torch.stack(hs, dim=1)


class Critic(nn.Module):
    """Quantile critic. Asymmetric: (proprio, global, action). Symmetric
    ablation: (image, proprio, action) through its own encoder."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        self.symmetric = cfg.symmetric_critic
        if self.symmetric:
            self.encoder = ConvEncoder(cfg.embed_dim)
            in_dim = cfg.embed_dim + PROPRIO_DIM + ACTION_DIM
        else:
            self.encoder = None
            in_dim = PROPRIO_DIM + GLOBAL_DIM + ACTION_DIM
        self.trunk = _mlp(in_dim, cfg.mlp_width, cfg.mlp_depth)
        self.head = nn.Linear(cfg.mlp_width, cfg.n_quantiles)
        self.register_buffer("proprio_scale", torch.tensor(_PROPRIO_SCALE), persistent=False)
        self.register_buffer("global_scale", torch.tensor(_GLOBAL_SCALE), persistent=False)
        init_module(self)
        expected = critic_param_count(cfg)
        assert self.param_count() == expected, (self.param_count(), expected)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed(self, image):
        """Image embedding for the symmetric critic (None otherwise)."""
        return self.encoder(image) if self.symmetric else None

    def forward(self, proprio, action, global_=None, image_embed=None) -> torch.Tensor:
        if self.symmetric:
            if global_ is not None:
                raise ValueError("symmetric critic must not be given global features")
            x = torch.cat([image_embed, proprio * self.proprio_scale, action], dim=-1)
        else:
            if global_ is None:
                raise ValueError("asymmetric critic needs global features")
            x = torch.cat([proprio * self.proprio_scale, global_ * self.global_scale, action], dim=-1)
        return self.head(self.trunk(x))


def _linear(i, o):
    return i * o + o


def _encoder_params(embed):
    n, c_in = 0, IMAGE_SHAPE[2]
    for c_out, k, _ in CONV_SPEC:
        n += c_out * c_in * k * k + c_out
        c_in = c_out
    side = conv_output_size()[-1]
    return n + _linear(c_in * side * side, embed)


def _mlp_params(in_dim, width, depth):
    return _linear(in_dim, width) + (depth - 1) * _linear(width, width)


def actor_param_count(cfg: NetConfig) -> int:
    in_dim = cfg.embed_dim + PROPRIO_DIM
    n = _encoder_params(cfg.embed_dim)
    if cfg.no_rnn:
        trunk_in = in_dim
    else:
        H = cfg.hidden_size
        n += 3 * H * (in_dim + H) + 6 * H
        trunk_in = H
    return n + _mlp_params(trunk_in, cfg.mlp_width, cfg.mlp_depth) + _linear(cfg.mlp_width, 2 * ACTION_DIM)


def critic_param_count(cfg: NetConfig) -> int:
    if cfg.symmetric_critic:
        n = _encoder_params(cfg.embed_dim)
        in_dim = cfg.embed_dim + PROPRIO_DIM + ACTION_DIM
    else:
        n = 0
        in_dim = PROPRIO_DIM + GLOBAL_DIM + ACTION_DIM
    return n + _mlp_params(in_dim, cfg.mlp_width, cfg.mlp_depth) + _linear(cfg.mlp_width, cfg.n_quantiles)


# the default (paper-width) networks
DEFAULT_ACTOR_PARAMS = 15_852_196
DEFAULT_CRITIC_PARAMS = 13_957_152


# -- tanh-Gaussian policy -------------------------------------------------------

def squash_log_det(u: torch.Tensor) -> torch.Tensor:
    """log |d tanh(u)/du| = log(1 - tanh(u)^2), computed stably."""
    return 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))


def tanh_gaussian_log_prob(u: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """Log density of a = tanh(u) where u ~ N(mean, exp(log_std)^2); summed over action dims."""
    z = (u - mean) * torch.exp(-log_std)
    normal = -0.5 * z * z - log_std - 0.5 * math.log(2.0 * math.pi)
    return (normal - squash_log_det(u)).sum(-1)


def sample_action(mean, log_std, noise):
    """Reparameterized sample; returns (action in (-1, 1), log prob)."""
    u = mean + torch.exp(log_std) * noise
    return torch.tanh(u), tanh_gaussian_log_prob(u, mean, log_std)


def deterministic_action(mean: torch.Tensor) -> torch.Tensor:
    # float32 tanh rounds to exactly +-1 past |u| ~ 9; keep the open interval
    bound = 1.0 - torch.finfo(mean.dtype).eps
    return torch.tanh(mean).clamp(-bound, bound)


# -- construction, reinit, optimizers ------------------------------------------

class Nets(nn.Module):
    """Actor, twin critics and their target copies."""

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.actor = Actor(cfg)
            self.critic1 = Critic(cfg)
            self.critic2 = Critic(cfg)
            self.target1 = Critic(cfg)
            self.target2 = Critic(cfg)
        self.sync_targets()
        for p in list(self.target1.parameters()) + list(self.target2.parameters()):
            p.requires_grad_(False)

    def sync_targets(self):
        self.target1.load_state_dict(self.critic1.state_dict())
        self.target2.load_state_dict(self.critic2.state_dict())

    def critic_parameters(self):
        return list(self.critic1.parameters()) + list(self.critic2.parameters())

    def reinitialize(self, seed: int):
        """Redraw actor and critic weights exactly as a fresh ``Nets(cfg, seed)``."""
        fresh = Nets(self.cfg, seed)
        self.load_state_dict(fresh.state_dict())


def make_optimizers(nets: Nets, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    actor_opt = torch.optim.Adam(nets.actor.parameters(), lr=lr, betas=betas, eps=eps)
    critic_opt = torch.optim.Adam(nets.critic_parameters(), lr=lr, betas=betas, eps=eps)
    return actor_opt, critic_opt


def adam_step_count(opt: torch.optim.Optimizer) -> int:
    steps = [int(s["step"]) for s in opt.state.values() if "step" in s]
    return max(steps, default=0)


@torch.no_grad()
def polyak_update(target: nn.Module, online: nn.Module, tau: float):
    for t, o in zip(target.parameters(), online.parameters()):
        t.mul_(1.0 - tau).add_(o, alpha=tau)


# -- checkpoint file --------------------------------------------------------------
# header: magic, u32 version, u32 epoch, u32 hidden size, u32 ablation bits,
# u32 json length + json (net config and extras), u32 tensor count; then per
# tensor: u16 name length, name, u8 dtype code, u8 ndim, u32 dims, raw bytes.
# Everything little-endian.

CKPT_MAGIC = b"EGRC"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    epoch: int
    net: NetConfig
    tensors: dict[str, np.ndarray]
    extra: dict

    def state_dict(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith(p)}

    def build_actor(self) -> Actor:
        actor = Actor(self.net)
        actor.load_state_dict(self.state_dict("actor"))
        actor.eval()
        return actor

    def load_into(self, nets: Nets):
        nets.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()})


def checkpoint_from_modules(epoch: int, cfg: NetConfig, modules: dict[str, nn.Module],
                            extra: dict | None = None) -> Checkpoint:
    tensors = {}
    for prefix, mod in modules.items():
        for k, v in mod.state_dict().items():
            tensors[f"{prefix}.{k}"] = v.detach().cpu().numpy()
    return Checkpoint(epoch, cfg, tensors, dict(extra or {}))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps({"net": asdict(ckpt.net), "extra": ckpt.extra}, sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IIIII", CKPT_VERSION, ckpt.epoch, ckpt.net.hidden_size,
                          ckpt.net.ablation_bits, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, epoch, hidden, bits, meta_len = struct.unpack("<IIIII", take(20))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(meta_len)))
    known = {f.name for f in fields(NetConfig)}
    net = NetConfig(**{k: v for k, v in meta["net"].items() if k in known})
    if net.hidden_size != hidden or net.ablation_bits != bits:
        raise CheckpointError("checkpoint header disagrees with its network description")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return Checkpoint(epoch, net, tensors, meta.get("extra", {}))


def read_checkpoint_header(data: bytes) -> dict:
    """Fixed header fields without decoding tensors."""
    if data[:4] != CKPT_MAGIC or len(data) < 24:
        raise CheckpointError("not a checkpoint file")
    version, epoch, hidden, bits, _ = struct.unpack("<IIIII", data[4:24])
    return {"version": version, "epoch": epoch, "hidden_size": hidden,
            "ablations": [a for i, a in enumerate(ABLATIONS) if bits >> i & 1]}


def save_checkpoint(path, ckpt: Checkpoint):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
