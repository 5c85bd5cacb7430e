"""Trainable image models that serve as memory and/or anomaly-detection modules.

Four kinds share one wrapper, :class:`Reconstructor`:

* ``CAE``  convolutional autoencoder with a ``(C, 4, 4)`` latent grid
* ``VAE``  variational autoencoder with a flat Gaussian latent
* ``SRGEN`` conditional U-Net generator + patch discriminator that maps a
  blurred (down- then up-scaled) image back to the original
* ``INPAINTGEN`` the same generator family, fed an occluded image plus the
  occlusion mask, trained to fill the holes

All tensors are float32 ``(N, 3, H, W)`` in [0, 1].
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

KINDS = ("CAE", "VAE", "SRGEN", "INPAINTGEN")
AUTOENCODERS = ("CAE", "VAE")
GENERATORS = ("SRGEN", "INPAINTGEN")


class CapabilityError(TypeError):
    """The model kind does not support the requested operation."""


@dataclass(frozen=True)
class ArchConfig:
    """Architecture and optimisation settings.

    Defaults reproduce the full-size setting (256 px, 512x4x4 CAE latent,
    256-d VAE latent). Desk-scale runs shrink ``working_size`` and the
    channel widths.
    """

    working_size: int = 256
    base_channels: int = 32
    max_channels: int = 512
    latent_channels: int = 512
    latent_dim: int = 256
    gen_channels: int = 32
    gen_depth: int | None = None
    disc_channels: int = 32
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 8
    epochs: int = 30
    kl_weight: float = 1.0
    l1_weight: float = 100.0
    sr_factor: int = 8
    seed: int = 0

    def __post_init__(self):
        stages = math.log2(self.working_size / 4)
        if self.working_size < 8 or stages != int(stages):
            raise ValueError("working_size must be a power of two >= 8")
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def low_size(self) -> int:
        """Side length of the degraded image the SR model learns to undo."""
        return max(1, self.working_size // self.sr_factor)

    @property
    def stages(self) -> int:
        return int(math.log2(self.working_size // 4))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown architecture fields {sorted(unknown)}")
        return cls(**d)


def _encoder_channels(cfg: ArchConfig, last: int | None = None) -> list[int]:
    chans = [min(cfg.base_channels * 2**k, cfg.max_channels) for k in range(cfg.stages)]
    if last is not None:
        chans[-1] = last
    return chans


class ConvEncoder(nn.Module):
    def __init__(self, channels: list[int], final_act: bool = True):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for k, c in enumerate(channels):
            layers.append(nn.Conv2d(c_in, c, 4, 2, 1))
            if k < len(channels) - 1 or final_act:
                layers.append(nn.LeakyReLU(0.2))
            c_in = c
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ConvDecoder(nn.Module):
    def __init__(self, channels: list[int]):
        super().__init__()
        chans = list(reversed(channels))
        layers: list[nn.Module] = []
        for c_in, c_out in zip(chans, chans[1:]):
            layers += [nn.ConvTranspose2d(c_in, c_out, 4, 2, 1), nn.ReLU()]
        layers.append(nn.ConvTranspose2d(chans[-1], 3, 4, 2, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class ConvAutoencoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        chans = _encoder_channels(cfg, last=cfg.latent_channels)
        self.encoder = ConvEncoder(chans, final_act=False)
        self.decoder = ConvDecoder(chans)
        self.latent_shape = (cfg.latent_channels, 4, 4)

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x):
        return self.decode(self.encode(x))


class VariationalAutoencoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        chans = _encoder_channels(cfg)
        self.top = chans[-1]
        self.encoder = ConvEncoder(chans, final_act=True)
        self.to_stats = nn.Linear(self.top * 16, 2 * cfg.latent_dim)
        self.from_latent = nn.Linear(cfg.latent_dim, self.top * 16)
        self.decoder = ConvDecoder(chans)
        self.latent_shape = (cfg.latent_dim,)

    def encode_stats(self, x):
        h = self.encoder(x).flatten(1)
        mu, logvar = self.to_stats(h).chunk(2, dim=1)
        return mu, logvar.clamp(-10.0, 10.0)

    def encode(self, x):
        return self.encode_stats(x)[0]

    def decode(self, z):
        h = F.relu(self.from_latent(z)).view(-1, self.top, 4, 4)
        return self.decoder(h)

    def forward(self, x):
        return self.decode(self.encode(x))


class UNetGenerator(nn.Module):
    """Encoder-decoder with skip connections.

    With ``residual=True`` the output is ``sigmoid(logit(x) + r)`` where the
    last layer starts at zero, so an untrained SR model passes its (blurred)
    input through unchanged.
    """

    def __init__(self, cfg: ArchConfig, in_channels: int = 3, residual: bool = False):
        super().__init__()
        depth = cfg.gen_depth or min(cfg.stages, 6)
        g = cfg.gen_channels
        chans = [min(g * 2**k, 8 * g) for k in range(depth)]
        self.downs = nn.ModuleList()
        c_in = in_channels
        for c in chans:
            self.downs.append(nn.Sequential(nn.Conv2d(c_in, c, 4, 2, 1), nn.LeakyReLU(0.2)))
            c_in = c
        self.ups = nn.ModuleList()
        for k in range(depth - 1, 0, -1):
            c_in = chans[k] if k == depth - 1 else 2 * chans[k]
            self.ups.append(nn.Sequential(nn.ConvTranspose2d(c_in, chans[k - 1], 4, 2, 1), nn.ReLU()))
        self.head = nn.ConvTranspose2d(2 * chans[0] if depth > 1 else chans[0], 3, 4, 2, 1)
        self.residual = residual
        if residual:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        feats = []
        h = x
        for down in self.downs:
            h = down(h)
            feats.append(h)
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            h = torch.cat([up(h), skip], dim=1)
        out = self.head(h)
        if self.residual:
            base = x[:, :3].clamp(1e-3, 1 - 1e-3)
            return torch.sigmoid(torch.logit(base) + out)
        return torch.sigmoid(out)


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: ArchConfig, cond_channels: int):
        super().__init__()
        d = cfg.disc_channels
        self.net = nn.Sequential(
            nn.Conv2d(cond_channels + 3, d, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(d, 2 * d, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * d, 4 * d, 3, 1, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * d, 1, 3, 1, 1),
        )

    def forward(self, cond, img):
        return self.net(torch.cat([cond, img], dim=1))


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class ModelSnapshot:
    """Frozen copy of a model taken at a task boundary."""

    def __init__(self, kind: str, net: nn.Module, task_index: int, config: ArchConfig | None = None):
        self.kind = kind
        self.task_index = task_index
        self.config = config
        self._net = _freeze(copy.deepcopy(net))

    @torch.no_grad()
    def reconstruct(self, inputs: torch.Tensor) -> torch.Tensor:
        return self._net(inputs)

    @torch.no_grad()
    def sample(self, n: int, seed: int) -> torch.Tensor:
        if self.kind != "VAE":
            raise CapabilityError(f"{self.kind} snapshot cannot sample")
        return _sample_vae(self._net, n, seed)

    @torch.no_grad()
    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        if self.kind not in AUTOENCODERS:
            raise CapabilityError(f"{self.kind} snapshot has no decoder")
        return self._net.decode(codes)

    def state_dict(self) -> dict:
        return self._net.state_dict()


def _sample_vae(net: nn.Module, n: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(n, net.latent_shape[0], generator=gen)
    return net.decode(z)


class Reconstructor:
    """A trainable image-to-image model plus its optimiser state."""

    def __init__(self, kind: str, config: ArchConfig):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.config = config
        self.disc: PatchDiscriminator | None = None
        self.opt_d: torch.optim.Optimizer | None = None
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            if kind == "CAE":
                self.net: nn.Module = ConvAutoencoder(config)
            elif kind == "VAE":
                self.net = VariationalAutoencoder(config)
            else:
                in_ch = 4 if kind == "INPAINTGEN" else 3
                self.net = UNetGenerator(config, in_channels=in_ch, residual=kind == "SRGEN")
                self.disc = PatchDiscriminator(config, cond_channels=in_ch)
        if self.disc is not None:
            self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=config.lr, betas=config.betas)
        self.opt = torch.optim.Adam(self.net.parameters(), lr=config.lr, betas=config.betas)
        self.steps = 0

    def __repr__(self):
        return f"Reconstructor({self.kind}, size={self.config.working_size}, params={self.parameter_count})"

    @property
    def latent_shape(self) -> tuple[int, ...] | None:
        return getattr(self.net, "latent_shape", None)

    @property
    def parameter_count(self) -> int:
        n = sum(p.numel() for p in self.net.parameters())
        if self.disc is not None:
            n += sum(p.numel() for p in self.disc.parameters())
        return n

    def _require(self, kinds, op):
        if self.kind not in kinds:
            raise CapabilityError(f"{op} is not available for {self.kind} models")

    # -- inference ---------------------------------------------------------

    @torch.no_grad()
    def encode(self, images: torch.Tensor) -> torch.Tensor:
        self._require(AUTOENCODERS, "encode")
        self.net.eval()
        return self.net.encode(images)

    @torch.no_grad()
    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        self._require(AUTOENCODERS, "decode")
        self.net.eval()
        return self.net.decode(codes)

    @torch.no_grad()
    def sample(self, n: int, seed: int = 0) -> torch.Tensor:
        self._require(("VAE",), "sample_generative")
        self.net.eval()
        return _sample_vae(self.net, n, seed)

    @torch.no_grad()
    def reconstruct(self, inputs: torch.Tensor) -> torch.Tensor:
        """Plain forward pass; for generators ``inputs`` is the conditioning image."""
        self.net.eval()
        return self.net(inputs)

    def snapshot(self, task_index: int) -> ModelSnapshot:
        return ModelSnapshot(self.kind, self.net, task_index, self.config)

    # -- training ----------------------------------------------------------

    def train_step(self, inputs: torch.Tensor, targets: torch.Tensor) -> dict[str, float]:
        """One optimiser step. Returns the loss components as floats."""
        if inputs.shape[0] != targets.shape[0] or inputs.shape[-2:] != targets.shape[-2:]:
            raise ValueError(
                f"input batch {tuple(inputs.shape)} does not match target batch {tuple(targets.shape)}"
            )
        self.net.train()
        self.steps += 1
        if self.kind == "CAE":
            loss = F.mse_loss(self.net(inputs), targets)
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            return {"reconstruction": loss.item(), "total": loss.item()}
        if self.kind == "VAE":
            mu, logvar = self.net.encode_stats(inputs)
            z = mu + torch.randn_like(mu) * torch.exp(0.5 * logvar)
            out = self.net.decode(z)
            n = inputs.shape[0]
            rec = F.binary_cross_entropy(out, targets, reduction="sum") / n
            kl = -0.5 * torch.sum(1 + logvar - mu.pow(2) - logvar.exp()) / n
            loss = rec + self.config.kl_weight * kl
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            return {"reconstruction": rec.item(), "kl": kl.item(), "total": loss.item()}
        return self._gan_step(inputs, targets)

    def _gan_step(self, inputs, targets):
        assert self.disc is not None and self.opt_d is not None
        self.disc.train()
        fake = self.net(inputs)

        real_logits = self.disc(inputs, targets)
        fake_logits = self.disc(inputs, fake.detach())
        d_loss = 0.5 * (
            F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
            + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
        )
        self.opt_d.zero_grad()
        d_loss.backward()
        self.opt_d.step()

        gen_logits = self.disc(inputs, fake)
        adv = F.binary_cross_entropy_with_logits(gen_logits, torch.ones_like(gen_logits))
        l1 = F.l1_loss(fake, targets)
        g_loss = adv + self.config.l1_weight * l1
        self.opt.zero_grad()
        g_loss.backward()
        self.opt.step()
        return {
            "reconstruction": l1.item(),
            "adversarial": adv.item(),
            "generator": g_loss.item(),
            "discriminator": d_loss.item(),
            "total": g_loss.item(),
        }

    # -- persistence -------------------------------------------------------

    def manifest(self, task_index: int | None = None) -> dict:
        return {
            "kind": self.kind,
            "architecture_config": self.config.to_dict(),
            "task_index": task_index,
            "seed": self.config.seed,
            "steps": self.steps,
        }

    def state_dict(self) -> dict:
        state = {"net": self.net.state_dict(), "opt": self.opt.state_dict(), "steps": self.steps}
        if self.disc is not None:
            state["disc"] = self.disc.state_dict()
            state["opt_d"] = self.opt_d.state_dict()
        return state

    def load_state_dict(self, state: dict) -> None:
        self.net.load_state_dict(state["net"])
        self.opt.load_state_dict(state["opt"])
        self.steps = state.get("steps", 0)
        if self.disc is not None:
            self.disc.load_state_dict(state["disc"])
            self.opt_d.load_state_dict(state["opt_d"])


def build_model(kind: str, config: ArchConfig | None = None, **overrides) -> Reconstructor:
    """Fresh model with seeded initialisation."""
    config = config or ArchConfig()
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return Reconstructor(kind, config)


def encode(model: Reconstructor, images: torch.Tensor) -> torch.Tensor:
    """Latent codes; the VAE returns its posterior mean."""
    return model.encode(images)


def decode(model: Reconstructor, codes: torch.Tensor) -> torch.Tensor:
    return model.decode(codes)


def sample_generative(model: Reconstructor, n: int, seed: int = 0) -> torch.Tensor:
    return model.sample(n, seed)


def train_step(model: Reconstructor, inputs: torch.Tensor, targets: torch.Tensor) -> dict[str, float]:
    return model.train_step(inputs, targets)


def snapshot(model: Reconstructor, task_index: int) -> ModelSnapshot:
    return model.snapshot(task_index)


def reconstruct_with(snap: ModelSnapshot, inputs: torch.Tensor) -> torch.Tensor:
    return snap.reconstruct(inputs)


def parameters_digest(module: nn.Module | Reconstructor) -> str:
    """SHA-256 over all parameters; cheap way to prove nothing was mutated."""
    import hashlib

    if isinstance(module, Reconstructor):
        module = module.net
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: Reconstructor, path: str | Path, task_index: int | None = None) -> Path:
    """Write ``<path>.pt`` (tensors) and ``<path>.json`` (manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path.with_suffix(".pt"))
    path.with_suffix(".json").write_text(json.dumps(model.manifest(task_index), indent=2))
    return path.with_suffix(".pt")


def load_checkpoint(path: str | Path) -> tuple[Reconstructor, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    model = Reconstructor(manifest["kind"], ArchConfig.from_dict(manifest["architecture_config"]))
    model.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=False))
    return model, manifest


def latent_bytes(model: Reconstructor) -> int:
    """Storage for one latent code at 4 bytes per element."""
    shape = model.latent_shape
    if shape is None:
        raise CapabilityError(f"{model.kind} has no latent code")
    return int(np.prod(shape)) * 4
