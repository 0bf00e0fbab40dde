"""Training loop, checkpointing, and painting -> pseudo-real inference."""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..corpus import DatasetManifest, ImageRecord, file_checksum, record_id_for
from ..errors import DecodeError, DivergedTraining, EmptyCorpus, NoCheckpoint
from .losses import LossReport, compute_losses, adversarial_loss, \
    least_squares_discriminator_loss, loss_report
from .nets import ACTIVATIONS, Discriminator, Generator, TranslatorPair

log = logging.getLogger(__name__)

LOSS_CSV_HEADER = ["step", "adv_ori", "adv_photo", "cyc", "total"]

_TRANSLATE_LOCK = threading.Lock()


@dataclass
class TrainConfig:
    """Hyperparameters plus network shape; serialized into every checkpoint."""

    iterations: int = 1000
    batch_size: int = 1
    learning_rate: float = 2e-4
    lambda_adv: float = 1.0
    lambda_cyc: float = 10.0
    image_size: int = 256
    seed: int = 0
    checkpoint_every: int = 100
    adv_mode: str = "log"
    base_channels: int = 32
    n_res_blocks: int = 2
    downsample: bool = True
    activation: str = "relu"
    use_norm: bool = True

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("batch_size", "image_size", "checkpoint_every",
                     "base_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("learning_rate", "lambda_adv", "lambda_cyc"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.n_res_blocks < 0:
            raise ValueError("n_res_blocks must be >= 0")
        if self.image_size % 2:
            raise ValueError("image_size must be even")
        if self.adv_mode not in ("log", "lsgan"):
            raise ValueError(f"adv_mode must be 'log' or 'lsgan', got {self.adv_mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainResult:
    run_dir: str
    reports: list[LossReport] = field(default_factory=list)
    checkpoint_steps: list[int] = field(default_factory=list)

    @property
    def final_report(self) -> LossReport:
        if not self.reports:
            raise NoCheckpoint("training produced no loss reports")
        return self.reports[-1]


def build_translator_pair(config: TrainConfig, identity_init: bool = False) -> TranslatorPair:
    """Construct both generators and discriminators, seeded by config.seed.

    identity_init zero-fills the generators' final layers so both start as
    exact identity maps.
    """
    torch.manual_seed(config.seed)
    gen_kwargs = dict(
        base_channels=config.base_channels,
        n_res_blocks=config.n_res_blocks,
        activation=config.activation,
        downsample=config.downsample,
        use_norm=config.use_norm,
        zero_init_last=identity_init,
    )
    disc_kwargs = dict(
        base_channels=config.base_channels,
        n_layers=2 if config.downsample else 1,
        activation="tanh" if config.activation == "tanh" else "leaky",
        use_norm=config.use_norm,
    )
    return TranslatorPair(
        gen_ori_to_photo=Generator(**gen_kwargs),
        gen_photo_to_ori=Generator(**gen_kwargs),
        disc_ori=Discriminator(**disc_kwargs),
        disc_photo=Discriminator(**disc_kwargs),
    )


def _load_image_array(path: str | Path, size: int) -> np.ndarray:
    """Image file -> float32 CHW array in [0, 1] at the training resolution."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            if rgb.size != (size, size):
                rgb = rgb.resize((size, size), Image.BILINEAR)
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return np.transpose(arr, (2, 0, 1))


def _domain_tensor(records: list[ImageRecord], size: int) -> torch.Tensor:
    arrays = [_load_image_array(r.path, size) for r in records]
    return torch.from_numpy(np.stack(arrays, axis=0))


# Checkpoint layout: one directory per step under the run dir, holding each
# network's weights plus a meta.json with the config and provenance hashes.
CHECKPOINT_FILES = ("gen_p2o", "gen_o2p", "disc_ori", "disc_photo")


def checkpoint_step_dir(run_dir: str | Path, step: int) -> Path:
    return Path(run_dir) / f"{step:06d}"


def save_checkpoint(pair: TranslatorPair, config: TrainConfig,
                    run_dir: str | Path, step: int,
                    extra_meta: dict | None = None) -> Path:
    out = checkpoint_step_dir(run_dir, step)
    out.mkdir(parents=True, exist_ok=True)
    nets = {
        "gen_p2o": pair.gen_photo_to_ori,
        "gen_o2p": pair.gen_ori_to_photo,
        "disc_ori": pair.disc_ori,
        "disc_photo": pair.disc_photo,
    }
    for name, net in nets.items():
        tmp = out / f".{name}.tmp"
        torch.save(net.state_dict(), tmp)
        tmp.replace(out / name)
    meta = {
        "step": step,
        "config": asdict(config),
        "torch_version": torch.__version__,
    }
    if extra_meta:
        meta.update(extra_meta)
    tmp = out / ".meta.json.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    tmp.replace(out / "meta.json")
    return out


def list_checkpoints(run_dir: str | Path) -> list[Path]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        return []
    out = []
    for child in sorted(run_dir.iterdir()):
        if child.is_dir() and child.name.isdigit() and (child / "meta.json").is_file():
            out.append(child)
    return out


def load_checkpoint(run_dir: str | Path, step: int | None = None
                    ) -> tuple[TranslatorPair, TrainConfig]:
    """Restore the pair at a given step (latest when step is None)."""
    if step is None:
        candidates = list_checkpoints(run_dir)
        if not candidates:
            raise NoCheckpoint(f"no checkpoints under {run_dir}")
        target = candidates[-1]
    else:
        target = checkpoint_step_dir(run_dir, step)
        if not (target / "meta.json").is_file():
            raise NoCheckpoint(f"checkpoint {target} does not exist")
    with open(target / "meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    config = TrainConfig.from_dict(meta["config"])
    pair = build_translator_pair(config)
    nets = {
        "gen_p2o": pair.gen_photo_to_ori,
        "gen_o2p": pair.gen_ori_to_photo,
        "disc_ori": pair.disc_ori,
        "disc_photo": pair.disc_photo,
    }
    for name, net in nets.items():
        weights = target / name
        if not weights.is_file():
            raise NoCheckpoint(f"checkpoint {target} is missing {name}")
        net.load_state_dict(torch.load(weights, map_location="cpu",
                                       weights_only=True))
    pair.step = int(meta["step"])
    return pair, config


def _sample(rng: np.random.Generator, tensor: torch.Tensor, batch: int) -> torch.Tensor:
    n = tensor.shape[0]
    idx = rng.choice(n, size=batch, replace=n < batch)
    return tensor[torch.from_numpy(np.ascontiguousarray(idx))]


def train(
    pair: TranslatorPair,
    manifest: DatasetManifest,
    config: TrainConfig,
    run_dir: str | Path,
    extra_meta: dict | None = None,
) -> TrainResult:
    """Alternating optimization: generator step first, then discriminators.

    Writes a checkpoint at step 0, every checkpoint_every steps, and at the
    end; appends one CSV row per step to run_dir/losses.csv. A non-finite loss
    aborts with DivergedTraining carrying the last good checkpoint path.
    Single-threaded torch for the duration so reruns are bit-identical.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    paintings = manifest.by_domain("painting")
    photos = manifest.by_domain("photo")
    if not paintings or not photos:
        raise EmptyCorpus(
            f"training manifest {manifest.name} needs both domains; "
            f"got {len(paintings)} paintings, {len(photos)} photos"
        )
    ori_all = _domain_tensor(paintings, config.image_size)
    photo_all = _domain_tensor(photos, config.image_size)

    rng = np.random.default_rng(config.seed)
    gen_opt = torch.optim.Adam(pair.generators(), lr=config.learning_rate,
                               betas=(0.5, 0.999))
    disc_opt = torch.optim.Adam(pair.discriminators(), lr=config.learning_rate,
                                betas=(0.5, 0.999))

    result = TrainResult(run_dir=str(run_dir))
    csv_path = run_dir / "losses.csv"
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        last_good = save_checkpoint(pair, config, run_dir, step=0,
                                    extra_meta=extra_meta)
        result.checkpoint_steps.append(0)
        pair.train_mode()
        with open(csv_path, "w", newline="", encoding="utf-8") as csv_file:
            writer = csv.writer(csv_file)
            writer.writerow(LOSS_CSV_HEADER)
            for step in range(1, config.iterations + 1):
                ori_b = _sample(rng, ori_all, config.batch_size)
                photo_b = _sample(rng, photo_all, config.batch_size)

                gen_opt.zero_grad()
                terms = compute_losses(pair, ori_b, photo_b, config)
                terms.total.backward()
                gen_opt.step()

                disc_opt.zero_grad()
                fake_ori = pair.gen_photo_to_ori(photo_b).detach()
                fake_photo = pair.gen_ori_to_photo(ori_b).detach()
                if config.adv_mode == "log":
                    # Discriminators ascend the minimax value.
                    disc_loss = -(
                        adversarial_loss(pair.disc_ori, ori_b, fake_ori)
                        + config.lambda_adv
                        * adversarial_loss(pair.disc_photo, photo_b, fake_photo)
                    )
                else:
                    disc_loss = (
                        least_squares_discriminator_loss(pair.disc_ori, ori_b, fake_ori)
                        + config.lambda_adv * least_squares_discriminator_loss(
                            pair.disc_photo, photo_b, fake_photo)
                    )
                disc_loss.backward()
                disc_opt.step()

                report = loss_report(step, terms, config)
                if not all(math.isfinite(v) for v in
                           (report.adv_ori, report.adv_photo, report.cyc)):
                    raise DivergedTraining(
                        f"non-finite loss at step {step}: {report}",
                        last_good_checkpoint=str(last_good),
                    )
                result.reports.append(report)
                writer.writerow([report.step, repr(report.adv_ori),
                                 repr(report.adv_photo), repr(report.cyc),
                                 repr(report.total)])
                pair.step = step

                if step % config.checkpoint_every == 0 or step == config.iterations:
                    last_good = save_checkpoint(pair, config, run_dir, step,
                                                extra_meta=extra_meta)
                    result.checkpoint_steps.append(step)
    finally:
        torch.set_num_threads(old_threads)

    meta = {
        "iterations": config.iterations,
        "manifest": manifest.name,
        "n_paintings": len(paintings),
        "n_photos": len(photos),
        "config": asdict(config),
        "final_step": pair.step,
    }
    with open(run_dir / "train_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return result


def translate_to_pseudo_real(
    source: TranslatorPair | str | Path,
    painting: ImageRecord,
    out_dir: str | Path,
    config: TrainConfig | None = None,
) -> ImageRecord:
    """Run a painting through the painting -> photo generator and register the
    result as a pseudo_real record. `source` is either a live pair (config
    required) or a run directory whose latest checkpoint is loaded."""
    if isinstance(source, TranslatorPair):
        if config is None:
            raise ValueError("config is required when passing a live pair")
        pair = source
    else:
        pair, config = load_checkpoint(source)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    arr = _load_image_array(painting.path, config.image_size)
    batch = torch.from_numpy(arr[None])
    pair.eval_mode()
    # Serialized single-threaded inference so regenerated outputs are
    # byte-identical across processes regardless of the host's thread pool,
    # and so a checkpoint pair shared between pipeline workers is safe.
    with _TRANSLATE_LOCK:
        old_threads = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            with torch.no_grad():
                out = pair.gen_ori_to_photo(batch).clamp(0.0, 1.0)[0]
        finally:
            torch.set_num_threads(old_threads)
    pixels = np.transpose(out.numpy(), (1, 2, 0))
    img = Image.fromarray(np.round(pixels * 255.0).astype(np.uint8))
    out_path = out_dir / f"{painting.id}_pseudo.png"
    img.save(out_path)

    checksum = file_checksum(out_path)
    return ImageRecord(
        id=record_id_for(f"{painting.id}_pseudo", checksum),
        domain_tag="pseudo_real",
        path=str(out_path),
        width=config.image_size,
        height=config.image_size,
        checksum=checksum,
    )
