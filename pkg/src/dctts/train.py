"""Two-stage training: spectrogram VQ first, then the text-conditioned diffusion model.

Every random choice is keyed by ``(seed, step)`` so an interrupted run resumed
from its checkpoint reproduces the uninterrupted loss curve exactly.
"""

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .audio import AudioParams, mel_spectrogram
from .config import Config
from .contrastive import tcll_matrix, token_log_likelihood
from .corpus import ToyCorpus, Utterance, load_corpus
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import (NoiseSchedule, corrupt_with_uniforms, corruption_uniforms, schedule_from_config,
                        training_timesteps, vlb_loss)
from .errors import CheckpointError, ConfigError, NumericError
from .io import load_checkpoint, save_checkpoint
from .rng import counter_bits, counter_uniform, derive_seed
from .substrate import DTYPE, Adam
from .text import (AcousticStats, AcousticTargets, TextConfig, TextFrontend, acoustic_loss,
                   acoustic_targets, default_g2p, fit_stats)
from .vq import SpectrogramVQ, VQConfig, flatten_tokens, reseed_dead_codes

logger = logging.getLogger(__name__)

STAGE1_COLUMNS = ["step", "total", "recon", "codebook", "commitment", "reseeded"]
STAGE2_COLUMNS = ["step", "vlb", "tcll", "acoustic", "total"]


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def run_dir_of(cfg: Config) -> Path:
    if not cfg["run.dir"]:
        raise ConfigError("run.dir must be set")
    path = Path(cfg["run.dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def corpus_of(cfg: Config) -> ToyCorpus:
    if not cfg["corpus.dir"]:
        raise ConfigError("corpus.dir must be set")
    return load_corpus(cfg["corpus.dir"])


def vq_checksum(vq: SpectrogramVQ) -> str:
    h = hashlib.sha256()
    for name, t in sorted(vq.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _named_state(prefix: str, module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v.detach().clone() for k, v in module.state_dict().items()}


def _load_named_state(prefix: str, module: torch.nn.Module, tensors: Dict[str, torch.Tensor]):
    state = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
    try:
        module.load_state_dict({k: v.to(module.state_dict()[k].dtype) for k, v in state.items()})
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint does not match the {prefix} architecture: {exc}") from exc


def _write_rows(path: Path, columns: Sequence[str], rows: List[Dict[str, float]], append: bool):
    new = not append or not path.exists()
    with open(path, "w" if new else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in columns})


def _truncate_csv(path: Path, last_step: int) -> None:
    """Drop rows logged after ``last_step`` (they will be recomputed on resume)."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
        columns = list(rows[0].keys()) if rows else None
    if columns is None:
        return
    kept = [r for r in rows if int(r["step"]) <= last_step]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(kept)


def read_loss_csv(path) -> List[Dict[str, float]]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _batch_indices(seed: int, step: int, n: int, batch: int, stream: int) -> List[int]:
    """Distinct items when possible, keyed by ``(seed, step)``."""
    order = np.argsort(counter_uniform(seed, step, np.arange(n), stream), kind="stable")
    if batch <= n:
        return [int(i) for i in order[:batch]]
    return [int(order[i % n]) for i in range(batch)]


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedItem:
    utterance: Utterance
    mel: np.ndarray
    ids: List[int]
    targets: AcousticTargets
    tokens: Optional[torch.Tensor] = None  # flat [N]
    grid_l: int = 0


def prepare_items(corpus: ToyCorpus, params: AudioParams, stats: Optional[AcousticStats] = None,
                  split: Optional[str] = None) -> List[PreparedItem]:
    g2p = default_g2p()
    items = []
    for u in corpus.utterances:
        if split is not None and u.split != split:
            continue
        mel = mel_spectrogram(u.waveform, params).values
        seq = g2p(u.text)
        if seq.symbols != list(u.phonemes):
            raise ConfigError(f"corpus phonemes for {u.text!r} disagree with the lexicon")
        targets = acoustic_targets(mel, u.waveform.samples, u.spans, params, stats)
        items.append(PreparedItem(u, mel, seq.ids, targets))
    return items


def acoustic_stats_for(items: Sequence[PreparedItem]) -> AcousticStats:
    return fit_stats([it.targets for it in items])


# ---------------------------------------------------------------------------
# stage 1: spectrogram VQ
# ---------------------------------------------------------------------------

@dataclass
class Stage1Result:
    run_dir: Path
    vq: SpectrogramVQ
    losses: List[Dict[str, float]] = field(default_factory=list)
    stats: Optional[AcousticStats] = None


def build_vq(cfg: Config) -> SpectrogramVQ:
    torch.manual_seed(derive_seed(cfg["seed"], 1))
    return SpectrogramVQ(VQConfig.from_config(cfg))


def vq_learning_rate(cfg: Config) -> float:
    # base rate x GPUs x batch size
    return cfg["vq.base_lr"] * cfg["vq.gpus"] * cfg["vq.batch_size"]


def train_stage1_vq(cfg: Config, resume: bool = True, stop_after: Optional[int] = None) -> Stage1Result:
    """Train the codec on the training split; writes ``vq.dckp``, ``stage1_loss.csv``, ``config.txt``.

    ``stop_after`` ends the run early with a checkpoint (used to exercise resume).
    """
    run = run_dir_of(cfg)
    corpus = corpus_of(cfg)
    params = AudioParams.from_config(cfg)
    items = prepare_items(corpus, params, split="train")
    if not items:
        raise ConfigError("corpus has no training utterances")
    frames = min(it.mel.shape[1] for it in items)
    mels = torch.stack([torch.as_tensor(it.mel[:, :frames], dtype=DTYPE) for it in items])

    vq = build_vq(cfg)
    opt = Adam(vq.named_parameters(), lr=vq_learning_rate(cfg), beta1=cfg["train.beta1"],
               beta2=cfg["train.beta2"], eps=cfg["train.eps"])
    unused = torch.zeros(vq.cfg.K, dtype=torch.long)
    start = 0
    ckpt_path = run / "vq.dckp"
    csv_path = run / "stage1_loss.csv"
    if resume and ckpt_path.exists():
        state = load_checkpoint(ckpt_path)
        _load_named_state("vq", vq, state)
        opt.load_state_tensors(state)
        unused = state["meta/unused"].long()
        start = int(state["meta/step"][0])
        _truncate_csv(csv_path, start)
        logger.info("resuming stage 1 from step %d", start)
    elif csv_path.exists():
        csv_path.unlink()

    steps = cfg["vq.steps"]
    seed = cfg["seed"]
    every = cfg["train.checkpoint_every"]
    rows: List[Dict[str, float]] = []

    def save(step):
        tensors = _named_state("vq", vq)
        tensors.update(opt.state_tensors())
        tensors["meta/step"] = torch.tensor([float(step)], dtype=DTYPE)
        tensors["meta/steps_total"] = torch.tensor([float(steps)], dtype=DTYPE)
        tensors["meta/unused"] = unused.to(DTYPE)
        save_checkpoint(ckpt_path, tensors)
        _write_rows(csv_path, STAGE1_COLUMNS, rows, append=True)
        rows.clear()

    step = start
    for step in range(start + 1, steps + 1):
        idx = _batch_indices(seed, step, len(items), cfg["vq.batch_size"], stream=11)
        opt.zero_grad()
        out = vq.loss(mels[idx])
        if not torch.isfinite(out["total"]):
            raise NumericError(f"non-finite VQ loss at step {step}")
        out["total"].backward()
        opt.step()
        used = torch.unique(out["indices"])
        gen = torch.Generator().manual_seed(derive_seed(seed, step, 2))
        reseeded = reseed_dead_codes(vq, unused, used, out["latent"], cfg["vq.dead_code_steps"], gen)
        rows.append({"step": step, **{k: float(out[k].detach()) for k in STAGE1_COLUMNS[1:5]},
                     "reseeded": reseeded})
        if (every and step % every == 0) or (stop_after is not None and step >= stop_after):
            save(step)
            if stop_after is not None and step >= stop_after:
                return Stage1Result(run, vq, read_loss_csv(csv_path))
    save(step)

    stats = acoustic_stats_for(items)
    run_cfg = cfg.copy()
    run_cfg.update_checked(stats.to_config())
    run_cfg.save(run / "config.txt")
    return Stage1Result(run, vq, read_loss_csv(csv_path), stats)


def load_vq(run_dir, cfg: Config, require_complete: bool = True) -> SpectrogramVQ:
    path = Path(run_dir) / "vq.dckp"
    state = load_checkpoint(path)
    if require_complete:
        done = int(state.get("meta/step", torch.zeros(1))[0])
        total = int(state.get("meta/steps_total", torch.zeros(1))[0])
        if done < 1 or done < total:
            raise CheckpointError(f"{path}: stage-1 training incomplete ({done}/{total} steps)")
    vq = SpectrogramVQ(VQConfig.from_config(cfg))
    _load_named_state("vq", vq, state)
    vq.eval()
    for p in vq.parameters():
        p.requires_grad_(False)
    return vq


def load_run_config(run_dir, overrides: Optional[Config] = None) -> Config:
    """Run config (with stage-1 statistics) overlaid by explicit settings."""
    path = Path(run_dir) / "config.txt"
    if not path.exists():
        raise CheckpointError(f"{path} missing: run stage 1 first")
    cfg = Config.load(path)
    if overrides is not None:
        stats = {k: v for k, v in cfg.items() if k.startswith("stats.")}
        cfg = overrides.copy()
        cfg.update_checked(stats)
    return cfg


# ---------------------------------------------------------------------------
# stage 2: text frontend + denoiser
# ---------------------------------------------------------------------------

@dataclass
class Stage2Models:
    frontend: TextFrontend
    denoiser: Denoiser
    schedule: NoiseSchedule

    def named_parameters(self):
        for n, p in self.frontend.named_parameters():
            yield f"frontend/{n}", p
        for n, p in self.denoiser.named_parameters():
            yield f"denoiser/{n}", p

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        out = _named_state("frontend", self.frontend)
        out.update(_named_state("denoiser", self.denoiser))
        return out

    def load_state_tensors(self, tensors: Dict[str, torch.Tensor]):
        _load_named_state("frontend", self.frontend, tensors)
        _load_named_state("denoiser", self.denoiser, tensors)


def build_stage2(cfg: Config, f: int) -> Stage2Models:
    torch.manual_seed(derive_seed(cfg["seed"], 3))
    vocab = len(default_g2p().inventory)
    frontend = TextFrontend(TextConfig.from_config(cfg, vocab))
    denoiser = Denoiser(DenoiserConfig.from_config(cfg, f=f))
    return Stage2Models(frontend, denoiser, schedule_from_config(cfg))


@dataclass
class StepLosses:
    vlb: torch.Tensor
    tcll: torch.Tensor
    acoustic: torch.Tensor
    aux: torch.Tensor
    total: torch.Tensor

    def row(self, step: int) -> Dict[str, float]:
        return {"step": step, "vlb": float(self.vlb.detach()), "tcll": float(self.tcll.detach()),
                "acoustic": float(self.acoustic.detach()), "total": float(self.total.detach())}


def stage2_losses(models: Stage2Models, batch: Sequence[PreparedItem], cfg: Config, step: int) -> StepLosses:
    """Loss components for one minibatch (no optimizer step).

    Each anchor ``i`` draws its timestep and corruption uniforms once; every
    sequence ``z_j`` scored against condition ``c_i`` is corrupted with those
    same uniforms, and the diagonal doubles as the VLB input.
    """
    s = models.schedule
    seed = cfg["seed"]
    lam = cfg["contrastive.lambda"]
    if cfg["contrastive.score"] not in ("sum", "mean"):
        raise ConfigError(f"contrastive.score must be 'sum' or 'mean', got {cfg['contrastive.score']!r}")
    b = len(batch)
    n = min(it.tokens.numel() for it in batch)
    l = n // models.denoiser.cfg.f
    z = torch.stack([it.tokens[:n] for it in batch])
    t = training_timesteps(s, seed, step, b)

    conds, ac_terms = [], []
    for it in batch:
        cond, pred = models.frontend(it.ids, it.targets, target_l=l)
        conds.append(cond)
        parts = acoustic_loss(pred, it.targets)
        ac_terms.append(parts["energy"] + parts["pitch"] + parts["duration"])
    acoustic = cfg["text.acoustic_weight"] * torch.stack(ac_terms).mean()
    u = torch.stack([corruption_uniforms(seed, step, i, n) for i in range(b)])

    if lam > 0 and b > 1:
        # x[i, j] = z_j corrupted with anchor i's key at t_i
        x = corrupt_with_uniforms(s, t.repeat_interleave(b), z.repeat(b, 1), u.repeat_interleave(b, dim=0))
        cond_all = torch.stack(conds).repeat_interleave(b, dim=0)
        logits = models.denoiser(x, t.repeat_interleave(b), cond_all).reshape(b, b, n, -1)
        scores = token_log_likelihood(logits, z[None].expand(b, b, n))
        if cfg["contrastive.score"] == "mean":
            # per-token log-likelihood keeps the contrastive gradient on the VLB's scale
            scores = scores / n
        tcll = tcll_matrix(scores, conds)
        diag = torch.arange(b)
        x_diag, logits_diag = x.reshape(b, b, n)[diag, diag], logits[diag, diag]
    else:
        x_diag = corrupt_with_uniforms(s, t, z, u)
        logits_diag = models.denoiser(x_diag, t, torch.stack(conds))
        tcll = logits_diag.new_zeros(())
    vlb = vlb_loss(s, z, x_diag, t, logits_diag)
    aux = logits_diag.new_zeros(())
    if cfg["diffusion.lambda_aux"] > 0:
        aux = F.cross_entropy(logits_diag.reshape(-1, logits_diag.shape[-1]).to(torch.float64), z.reshape(-1))
    total = vlb + lam * tcll + acoustic + cfg["diffusion.lambda_aux"] * aux
    for name, value in (("vlb", vlb), ("tcll", tcll), ("acoustic", acoustic), ("aux", aux)):
        if not torch.isfinite(value):
            raise NumericError(f"non-finite {name} loss at step {step}")
    return StepLosses(vlb, tcll, acoustic, aux, total)


def training_step(models: Stage2Models, opt: Adam, batch: Sequence[PreparedItem], cfg: Config,
                  step: int) -> StepLosses:
    opt.zero_grad()
    losses = stage2_losses(models, batch, cfg, step)
    losses.total.backward()
    if cfg["train.grad_clip"] > 0:
        torch.nn.utils.clip_grad_norm_([p for _, p in opt.named], cfg["train.grad_clip"])
    opt.step()
    return losses


@dataclass
class Stage2Result:
    run_dir: Path
    models: Stage2Models
    losses: List[Dict[str, float]]
    vq_checksum_before: str
    vq_checksum_after: str


def tokenize_items(vq: SpectrogramVQ, items: Sequence[PreparedItem]) -> None:
    for it in items:
        grid = vq.tokenize(torch.as_tensor(it.mel, dtype=DTYPE))[0]
        it.tokens = flatten_tokens(grid)
        it.grid_l = grid.shape[-1]


def train_stage2_diffusion(cfg: Config, resume: bool = True, stop_after: Optional[int] = None) -> Stage2Result:
    """Train frontend + denoiser against frozen VQ tokens; writes ``diffusion.dckp`` and ``stage2_loss.csv``."""
    run = run_dir_of(cfg)
    cfg = load_run_config(run, cfg)
    vq = load_vq(run, cfg)
    before = vq_checksum(vq)
    stats = AcousticStats.from_config(cfg)
    corpus = corpus_of(cfg)
    params = AudioParams.from_config(cfg)
    items = prepare_items(corpus, params, stats, split="train")
    tokenize_items(vq, items)

    models = build_stage2(cfg, vq.cfg.f)
    opt = Adam(models.named_parameters(), lr=cfg["train.lr"], beta1=cfg["train.beta1"],
               beta2=cfg["train.beta2"], eps=cfg["train.eps"])
    ckpt_path = run / "diffusion.dckp"
    csv_path = run / "stage2_loss.csv"
    start = 0
    if resume and ckpt_path.exists():
        state = load_checkpoint(ckpt_path)
        models.load_state_tensors(state)
        opt.load_state_tensors(state)
        start = int(state["meta/step"][0])
        _truncate_csv(csv_path, start)
        logger.info("resuming stage 2 from step %d", start)
    elif csv_path.exists():
        csv_path.unlink()

    steps = cfg["train.steps"]
    every = cfg["train.checkpoint_every"]
    rows: List[Dict[str, float]] = []

    def save(step):
        tensors = models.state_tensors()
        tensors.update(opt.state_tensors())
        tensors["meta/step"] = torch.tensor([float(step)], dtype=DTYPE)
        tensors["meta/steps_total"] = torch.tensor([float(steps)], dtype=DTYPE)
        save_checkpoint(ckpt_path, tensors)
        _write_rows(csv_path, STAGE2_COLUMNS, rows, append=True)
        rows.clear()

    step = start
    for step in range(start + 1, steps + 1):
        idx = _batch_indices(cfg["seed"], step, len(items), cfg["train.batch_size"], stream=12)
        losses = training_step(models, opt, [items[i] for i in idx], cfg, step)
        rows.append(losses.row(step))
        if step % 100 == 0:
            logger.info("stage 2 step %d: %s", step, losses.row(step))
        if (every and step % every == 0) or (stop_after is not None and step >= stop_after):
            save(step)
            if stop_after is not None and step >= stop_after:
                break
    else:
        save(step)
    after = vq_checksum(vq)
    return Stage2Result(run, models, read_loss_csv(csv_path), before, after)


def load_stage2(run_dir, cfg: Config, f: int, require_complete: bool = True) -> Stage2Models:
    path = Path(run_dir) / "diffusion.dckp"
    state = load_checkpoint(path)
    done = int(state.get("meta/step", torch.zeros(1))[0])
    if require_complete and done < 1:
        raise CheckpointError(f"{path}: untrained diffusion checkpoint")
    models = build_stage2(cfg, f)
    models.load_state_tensors(state)
    for p in list(models.frontend.parameters()) + list(models.denoiser.parameters()):
        p.requires_grad_(False)
    models.frontend.eval()
    models.denoiser.eval()
    models.denoiser.check_finite()
    return models


# ---------------------------------------------------------------------------
# unconditional toy chain (distribution-recovery check)
# ---------------------------------------------------------------------------

def train_unconditional(data: torch.Tensor, schedule: NoiseSchedule, denoiser: Denoiser, steps: int,
                        batch_size: int, lr: float, seed: int, decay_start: Optional[float] = 0.5) -> List[float]:
    """Fit an unconditional denoiser to rows of ``data`` ``[M, N]`` with the pure VLB.

    After ``decay_start * steps`` the learning rate falls linearly to zero;
    at a constant rate the minibatch noise leaves the learned marginals
    visibly off. ``None`` keeps it constant.
    """
    opt = Adam(denoiser.named_parameters(), lr=lr)
    m, n = data.shape
    losses = []
    for step in range(1, steps + 1):
        if decay_start is not None:
            frac = (step - 1) / steps
            opt.set_lr(lr * min(1.0, (1.0 - frac) / max(1.0 - decay_start, 1e-12)))
        pick = torch.from_numpy((counter_bits(seed, step, np.arange(batch_size), 21) % np.uint64(m)).astype(np.int64))
        z = data[pick]
        t = training_timesteps(schedule, seed, step, batch_size)
        u = torch.from_numpy(counter_uniform(seed, step, np.arange(batch_size * n), 22)).reshape(batch_size, n)
        x = corrupt_with_uniforms(schedule, t, z, u)
        opt.zero_grad()
        loss = vlb_loss(schedule, z, x, t, denoiser(x, t))
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite vlb loss at step {step}")
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses
