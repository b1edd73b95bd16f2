# Copyright (c) 2025, Crowd Hat Contributors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
The Crowd Hat network.

A 2D conv encoder over t2d and a 1D conv encoder over t1d produce the global
feature F_g; a shared 2D conv encoder over each of the K x K patches of t2d
produces the local features F_l^i. The NMS decoder P_N maps
concat(F_l^i, F_g) to a per-region threshold in [0, 1]; the count decoder
P_C maps F_g to a nonnegative crowd count.

Everything runs on CPU in float64.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from compress import CHANNEL_ORDER, CompressedFeatures
from core import ConfigError, ModelFormatError, NonFiniteLossError, ShapeError, TrainingDivergedError

logger = logging.getLogger("CrowdHat.net")

MODEL_VERSION = "crowd-hat-model/1"
DTYPE = torch.float64
TRAIN_MODES = ("joint", "nms", "count")


@dataclass
class HatArchitecture:
    C: int = 2
    S: int = 64
    L: int = 256
    K: int = 4
    enc2d: Tuple[int, ...] = (16, 32, 64, 128)
    enc1d: Tuple[int, ...] = (16, 32, 64)
    local_enc: Tuple[int, ...] = (16, 32, 64)
    pn_hidden: int = 128
    pc_hidden: int = 128
    # Names from CHANNEL_ORDER the network consumes; None means all C channels
    feature_channels: Optional[Tuple[str, ...]] = None
    use_1d: bool = True

    def validate(self) -> "HatArchitecture":
        if self.C not in (2, 4):
            raise ConfigError(f"C must be 2 or 4, got {self.C}")
        if self.K < 1 or self.S % self.K:
            raise ConfigError(f"K={self.K} must divide S={self.S}")
        for name in ("enc2d", "enc1d", "local_enc"):
            widths = getattr(self, name)
            if not widths or any(w < 1 for w in widths):
                raise ConfigError(f"{name} needs at least one positive width, got {widths}")
        if self.S < 2 ** (len(self.enc2d) - 1):
            raise ConfigError(f"S={self.S} too small for {len(self.enc2d)} pooled stages")
        if self.S // self.K < 2 ** (len(self.local_enc) - 1):
            raise ConfigError(f"patch side {self.S // self.K} too small for {len(self.local_enc)} pooled stages")
        if self.use_1d and self.L < 2 ** (len(self.enc1d) - 1):
            raise ConfigError(f"L={self.L} too small for {len(self.enc1d)} pooled stages")
        if self.pn_hidden < 1 or self.pc_hidden < 1:
            raise ConfigError("decoder hidden widths must be >= 1")
        names = CHANNEL_ORDER[:self.C]
        if self.feature_channels is not None:
            unknown = [c for c in self.feature_channels if c not in names]
            if unknown or not self.feature_channels:
                raise ConfigError(f"feature_channels must be a nonempty subset of {names}, got {self.feature_channels}")
        return self

    @property
    def input_channels(self) -> List[int]:
        names = CHANNEL_ORDER[:self.C]
        if self.feature_channels is None:
            return list(range(self.C))
        return [names.index(c) for c in self.feature_channels]

    @property
    def global_dim(self) -> int:
        return self.enc2d[-1] + (self.enc1d[-1] if self.use_1d else 0)

    @property
    def local_dim(self) -> int:
        return self.local_enc[-1]

    @property
    def regions(self) -> int:
        return self.K * self.K

    @classmethod
    def from_dict(cls, data: dict) -> "HatArchitecture":
        data = dict(data)
        for name in ("enc2d", "enc1d", "local_enc"):
            data[name] = tuple(data[name])
        if data.get("feature_channels") is not None:
            data["feature_channels"] = tuple(data["feature_channels"])
        return cls(**data)


@dataclass
class TrainSample:
    scene_id: str
    t2d: np.ndarray
    t1d: np.ndarray
    thresholds: np.ndarray
    count: int

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "t2d": self.t2d, "t1d": self.t1d,
                "thresholds": np.asarray(self.thresholds, dtype=np.float64), "count": int(self.count)}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainSample":
        return cls(data["scene_id"], np.asarray(data["t2d"]), np.asarray(data["t1d"]),
                   np.asarray(data["thresholds"], dtype=np.float64), int(data["count"]))


def _conv_stack(widths: Sequence[int], in_channels: int, dims: int) -> nn.Sequential:
    """Conv(3) + ReLU + MaxPool(2) per stage; the last stage is a bare conv (GAP follows)."""
    conv = nn.Conv2d if dims == 2 else nn.Conv1d
    pool = nn.MaxPool2d if dims == 2 else nn.MaxPool1d
    layers = []
    for k, out_channels in enumerate(widths):
        layers.append(conv(in_channels, out_channels, kernel_size=3, padding=1))
        if k < len(widths) - 1:
            layers += [nn.ReLU(), pool(2)]
        in_channels = out_channels
    return nn.Sequential(*layers)


class CrowdHatNet(nn.Module):

    def __init__(self, arch: HatArchitecture):
        super().__init__()
        self.arch = arch
        c_in = len(arch.input_channels)
        self.register_buffer("channel_index", torch.tensor(arch.input_channels, dtype=torch.long), persistent=False)
        self.enc2d = _conv_stack(arch.enc2d, c_in, 2)
        self.enc1d = _conv_stack(arch.enc1d, c_in, 1) if arch.use_1d else None
        self.local_enc = _conv_stack(arch.local_enc, c_in, 2)
        self.nms_decoder = nn.Sequential(
            nn.Linear(arch.local_dim + arch.global_dim, arch.pn_hidden), nn.ReLU(),
            nn.Linear(arch.pn_hidden, 1))
        self.count_decoder = nn.Sequential(
            nn.Linear(arch.global_dim, arch.pc_hidden), nn.ReLU(),
            nn.Linear(arch.pc_hidden, 1))
        for module in self.modules():
            if isinstance(module, (nn.Conv1d, nn.Conv2d, nn.Linear)):
                nn.init.zeros_(module.bias)

    def _check(self, t2d: torch.Tensor, t1d: Optional[torch.Tensor] = None):
        a = self.arch
        if t2d.dim() != 4 or tuple(t2d.shape[1:]) != (a.C, a.S, a.S):
            raise ShapeError(f"t2d must be (B, {a.C}, {a.S}, {a.S}), got {tuple(t2d.shape)}")
        if t1d is not None and (t1d.dim() != 3 or tuple(t1d.shape[1:]) != (a.C, a.L)):
            raise ShapeError(f"t1d must be (B, {a.C}, {a.L}), got {tuple(t1d.shape)}")

    def _normalize_2d(self, t2d: torch.Tensor) -> torch.Tensor:
        return torch.log1p(t2d.index_select(1, self.channel_index) * float(self.arch.S ** 2))

    def _normalize_1d(self, t1d: torch.Tensor) -> torch.Tensor:
        return torch.log1p(t1d.index_select(1, self.channel_index))

    def encode_global(self, t2d: torch.Tensor, t1d: torch.Tensor) -> torch.Tensor:
        self._check(t2d, t1d)
        parts = [self.enc2d(self._normalize_2d(t2d)).mean(dim=(-2, -1))]
        if self.enc1d is not None:
            parts.append(self.enc1d(self._normalize_1d(t1d)).mean(dim=-1))
        return torch.cat(parts, dim=1)

    def split_patches(self, t2d: torch.Tensor) -> torch.Tensor:
        """(B, C, S, S) -> (B, K*K, C, S/K, S/K), region r = x-patch + K * y-patch."""
        B, C, S, _ = t2d.shape
        K = self.arch.K
        P = S // K
        patches = t2d.reshape(B, C, K, P, K, P).permute(0, 4, 2, 1, 3, 5)
        return patches.reshape(B, K * K, C, P, P)

    def encode_local(self, t2d: torch.Tensor) -> torch.Tensor:
        self._check(t2d)
        B = t2d.shape[0]
        patches = self.split_patches(self._normalize_2d(t2d))
        flat = patches.reshape(B * self.arch.regions, *patches.shape[2:])
        return self.local_enc(flat).mean(dim=(-2, -1)).reshape(B, self.arch.regions, -1)

    def decode_thresholds(self, f_global: torch.Tensor, f_local: torch.Tensor) -> torch.Tensor:
        joined = torch.cat([f_local, f_global[:, None, :].expand(-1, f_local.shape[1], -1)], dim=-1)
        return torch.sigmoid(self.nms_decoder(joined)).squeeze(-1)

    def decode_count(self, f_global: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.count_decoder(f_global)).squeeze(-1)

    def forward(self, t2d: torch.Tensor, t1d: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        f_global = self.encode_global(t2d, t1d)
        f_local = self.encode_local(t2d)
        return self.decode_thresholds(f_global, f_local), self.decode_count(f_global)


@dataclass
class HatModel:
    arch: HatArchitecture
    net: CrowdHatNet
    optimizer: torch.optim.Adam
    seed: int
    epochs_trained: int = 0
    loss_curve: List[float] = field(default_factory=list)


def build_model(arch: HatArchitecture, seed: int = 7, lr: float = 1e-5) -> HatModel:
    """Fresh model with weights drawn from a private RNG stream seeded by `seed`."""
    arch.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = CrowdHatNet(arch).to(DTYPE)
    optimizer = torch.optim.Adam(net.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
    return HatModel(arch, net, optimizer, seed)


def count_parameters(model: HatModel) -> int:
    return sum(p.numel() for p in model.net.parameters())


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))


def _batched(x, dims: int) -> torch.Tensor:
    t = _as_tensor(x)
    return t.unsqueeze(0) if t.dim() == dims else t


def forward_global(model: HatModel, t2d, t1d) -> torch.Tensor:
    """Global feature F_g of one sample (C,S,S)/(C,L), or a batch."""
    f = model.net.encode_global(_batched(t2d, 3), _batched(t1d, 2))
    return f[0] if _as_tensor(t2d).dim() == 3 else f


def forward_local(model: HatModel, t2d) -> List[torch.Tensor]:
    """The K*K local features of one sample, region order row-major over y then x."""
    f = model.net.encode_local(_batched(t2d, 3))
    return list(f[0].unbind(0))


def predict_thresholds(model: HatModel, f_global: torch.Tensor, f_local: Sequence[torch.Tensor]) -> torch.Tensor:
    stacked = torch.stack(list(f_local))[None]
    return model.net.decode_thresholds(f_global[None], stacked)[0]


def predict_count(model: HatModel, f_global: torch.Tensor) -> torch.Tensor:
    return model.net.decode_count(f_global[None])[0]


@torch.no_grad()
def predict(model: HatModel, features: CompressedFeatures) -> Tuple[np.ndarray, float]:
    """Region thresholds (K*K,) and raw count for one scene's features."""
    model.net.eval()
    thresholds, count = model.net(_batched(features.t2d, 3), _batched(features.t1d, 2))
    return thresholds[0].numpy().copy(), float(count[0])


def _loss_weights(mode: str, lam: float) -> Tuple[float, float]:
    if mode == "joint":
        return 1.0, lam
    if mode == "nms":
        return 1.0, 0.0
    if mode == "count":
        return 0.0, 1.0
    raise ConfigError(f"unknown training mode '{mode}', expected one of {TRAIN_MODES}")


def _stack(samples: Sequence[TrainSample]):
    t2d = torch.from_numpy(np.stack([s.t2d for s in samples]).astype(np.float64))
    t1d = torch.from_numpy(np.stack([s.t1d for s in samples]).astype(np.float64))
    labels = torch.from_numpy(np.stack([s.thresholds for s in samples]).astype(np.float64))
    counts = torch.tensor([float(s.count) for s in samples], dtype=DTYPE)
    return t2d, t1d, labels, counts


def _per_sample_loss(net: CrowdHatNet, t2d, t1d, labels, counts, w_nms: float, w_count: float) -> torch.Tensor:
    thresholds, n_hat = net(t2d, t1d)
    l_nms = (thresholds - labels).abs().mean(dim=1)
    l_count = (n_hat - counts).abs()
    return w_nms * l_nms + w_count * l_count


def _check_finite(per_sample: torch.Tensor, ids: Sequence[str]):
    finite = torch.isfinite(per_sample)
    if not bool(finite.all()):
        bad = int((~finite).nonzero()[0, 0])
        raise NonFiniteLossError(ids[bad], per_sample[bad].detach().item())


def loss(model: HatModel, batch: Sequence[TrainSample], lam: float = 1.0,
         mode: str = "joint") -> Tuple[float, torch.Tensor]:
    """
    Mean combined loss over a batch and its gradient.

    L = mean_b [ (1/K^2) sum_i |P_N(F_l^i, F_g) - T_i| + lam * |P_C(F_g) - N| ]

    Returns:
        (loss value, flat gradient vector in parameter order)

    Raises:
        NonFiniteLossError: Naming the first sample with a non-finite loss
    """
    if not batch:
        raise ValueError("loss() needs a nonempty batch")
    w_nms, w_count = _loss_weights(mode, lam)
    net = model.net
    net.train()
    net.zero_grad(set_to_none=False)
    per_sample = _per_sample_loss(net, *_stack(batch), w_nms, w_count)
    _check_finite(per_sample, [s.scene_id for s in batch])
    value = per_sample.mean()
    value.backward()
    grad = torch.cat([p.grad.reshape(-1) for p in net.parameters()])
    return value.detach().item(), grad


def train(model: HatModel, dataset: Sequence[TrainSample], epochs: int, batch_size: int = 16,
          lr: float = 1e-5, lam: float = 1.0, mode: str = "joint", seed: Optional[int] = None,
          progress: bool = False) -> Tuple[HatModel, List[float]]:
    """
    Train with Adam on shuffled minibatches.

    Shuffling draws from a numpy stream seeded by `seed` (the model seed when
    omitted), so a repeated run reproduces the loss curve exactly.

    Returns:
        (model, per-epoch mean loss)

    Raises:
        TrainingDivergedError: If any parameter becomes non-finite
    """
    if not dataset:
        raise ValueError("train() needs a nonempty dataset")
    if epochs < 0 or batch_size < 1:
        raise ValueError(f"epochs must be >= 0 and batch_size >= 1, got {epochs}, {batch_size}")
    w_nms, w_count = _loss_weights(mode, lam)
    net, optimizer = model.net, model.optimizer
    for group in optimizer.param_groups:
        group["lr"] = lr

    t2d, t1d, labels, counts = _stack(dataset)
    ids = [s.scene_id for s in dataset]
    rng = np.random.default_rng(model.seed if seed is None else seed)
    n = len(dataset)
    curve = []
    net.train()
    for epoch in tqdm(range(epochs), desc="train", disable=not progress):
        order = torch.from_numpy(rng.permutation(n))
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            optimizer.zero_grad(set_to_none=False)
            per_sample = _per_sample_loss(net, t2d[idx], t1d[idx], labels[idx], counts[idx], w_nms, w_count)
            _check_finite(per_sample, [ids[i] for i in idx.tolist()])
            value = per_sample.mean()
            value.backward()
            optimizer.step()
            batch_loss = value.detach().item()
            total += batch_loss * len(idx)
            for name, p in net.named_parameters():
                if not bool(torch.isfinite(p).all()):
                    raise TrainingDivergedError(
                        f"parameter '{name}' became non-finite at epoch {epoch}, batch {start // batch_size} "
                        f"(batch loss {batch_loss:.6g}, lr {lr:g})")
        curve.append(total / n)
        logger.debug(f"epoch {epoch + 1}/{epochs}: loss {curve[-1]:.6f}")
    model.epochs_trained += epochs
    model.loss_curve.extend(curve)
    return model, curve


def save_model(model: HatModel, path: str) -> None:
    torch.save({
        "version": MODEL_VERSION,
        "arch": asdict(model.arch),
        "state_dict": model.net.state_dict(),
        "optimizer": model.optimizer.state_dict(),
        "seed": model.seed,
        "epochs_trained": model.epochs_trained,
        "loss_curve": list(model.loss_curve),
    }, path)


def load_model(path: str) -> HatModel:
    """
    Restore a model saved by save_model().

    Raises:
        ModelFormatError: If the file is not a checkpoint of this version
    """
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise ModelFormatError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or blob.get("version") != MODEL_VERSION:
        found = blob.get("version") if isinstance(blob, dict) else type(blob).__name__
        raise ModelFormatError(f"checkpoint {path} has version {found!r}, expected {MODEL_VERSION!r}")
    arch = HatArchitecture.from_dict(blob["arch"])
    model = build_model(arch, seed=blob["seed"])
    model.net.load_state_dict(blob["state_dict"])
    model.optimizer.load_state_dict(blob["optimizer"])
    model.epochs_trained = blob.get("epochs_trained", 0)
    model.loss_curve = list(blob.get("loss_curve", []))
    return model
