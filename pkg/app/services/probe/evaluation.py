from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import json
import math
import multiprocessing

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field

from app.services.audio.pipeline import sample_segment
from app.services.model.checkpoint import load_checkpoint
from app.services.model.network import AgainVC, ModelConfig, parameter_count
from app.services.model.ops import ActivationSpec
from app.services.training.corpus import CorpusIndex, MelStore
from app.services.training.trainer import DivergenceError, TrainConfig, run_training
from utils.hashing import fingerprint
from utils.logger import logger
from .classifier import DegenerateProbeError, ProbeConfig, ProbeResult, fit_probe

SWEEP_COLUMNS = ["activation", "alpha", "bottleneck", "acc_C", "acc_S", "rec", "params"]
DEFAULT_BOTTLENECKS = [1, 2, 4, 8, 16, 32, 64, 128]
VARIANT_LABELS = {"single_encoder": "1-Enc", "dual_encoder": "2-Enc"}


class ProbeReport(BaseModel):
    activation: str
    alpha: Optional[float] = None
    bottleneck: int
    variant: str = "single_encoder"
    seed: int = 0
    acc_content: float = Field(default=math.nan, description="Speaker accuracy (%) on content embeddings")
    acc_style: float = Field(default=math.nan, description="Speaker accuracy (%) on style statistics")
    rec_error: float = Field(default=math.nan, description="Mean L1 reconstruction error on held-out segments")
    param_count: int = 0
    n_speakers: int = 0
    chance: float = math.nan
    flagged: bool = False
    fingerprint: str = ""
    status: str = "ok"
    error: Optional[str] = None

    def to_row(self) -> Dict[str, object]:
        return {
            "activation": self.activation,
            "alpha": self.alpha,
            "bottleneck": self.bottleneck,
            "acc_C": self.acc_content,
            "acc_S": self.acc_style,
            "rec": self.rec_error,
            "params": self.param_count,
            "chance": self.chance,
            "flagged": self.flagged,
            "variant": self.variant,
            "seed": self.seed,
            "status": self.status,
            "fingerprint": self.fingerprint,
        }


class SweepGrid(BaseModel):
    activations: List[ActivationSpec] = Field(..., min_length=1)
    bottlenecks: List[int] = Field(default_factory=lambda: list(DEFAULT_BOTTLENECKS), min_length=1)

    @classmethod
    def activation_table(cls, bottleneck: int = 4) -> "SweepGrid":
        """None, ReLU, ELU, Tanh and Sigmoid with alpha 1, 0.1 and 0.01 at one bottleneck size."""
        specs = ["none", "relu", "elu", "tanh", "sigmoid:1", "sigmoid:0.1", "sigmoid:0.01"]
        return cls(activations=[ActivationSpec.parse(s) for s in specs], bottlenecks=[bottleneck])

    def points(self) -> List[Tuple[ActivationSpec, int]]:
        return [(spec, size) for spec in self.activations for size in self.bottlenecks]


@dataclass
class ProbeSplit:
    mels: torch.Tensor
    labels: torch.Tensor
    refs: List[str]


def _resolve_model(model: Union[AgainVC, str, Path]) -> AgainVC:
    if isinstance(model, AgainVC):
        return model
    loaded, _ = load_checkpoint(model)
    return loaded


def build_probe_splits(
    index: CorpusIndex,
    config: ProbeConfig,
    store: Optional[MelStore] = None,
    segment_length: int = 128,
) -> Tuple[ProbeSplit, ProbeSplit, List[str]]:
    """Seeded crops from training speakers, split by utterance into probe-train and probe-eval."""
    speakers = list(index.train_speakers)
    if len(speakers) < 2:
        raise DegenerateProbeError(f"Probing needs at least 2 training speakers, got {len(speakers)}")
    store = store or MelStore(index)
    rng = np.random.default_rng(config.seed)

    parts = {"train": ([], [], []), "eval": ([], [], [])}
    for label, speaker in enumerate(speakers):
        refs = list(index.utterances[speaker])
        if len(refs) < 2:
            raise DegenerateProbeError(f"Speaker {speaker} needs at least 2 utterances for a held-out split")
        order = rng.permutation(len(refs))
        n_eval = min(max(int(round(config.eval_fraction * len(refs))), 1), len(refs) - 1)
        for position, ref_index in enumerate(order):
            ref = refs[ref_index]
            values, labels, names = parts["eval" if position < n_eval else "train"]
            mel = store.get(ref)
            for _ in range(config.segments_per_utterance):
                values.append(sample_segment(mel, rng, segment_length).values)
                labels.append(label)
                names.append(ref)

    def _split(name: str) -> ProbeSplit:
        values, labels, names = parts[name]
        return ProbeSplit(torch.from_numpy(np.stack(values)), torch.tensor(labels, dtype=torch.long), names)

    return _split("train"), _split("eval"), speakers


@torch.no_grad()
def extract_embeddings(model: AgainVC, mels: torch.Tensor, batch_size: int = 64) -> Tuple[torch.Tensor, torch.Tensor]:
    """Frozen forward pass: post-activation content (N, C_b, L) and style as a 1-frame sequence (N, D, 1)."""
    was_training = model.training
    model.eval()
    param = next(model.parameters())
    contents, styles = [], []
    for start in range(0, len(mels), batch_size):
        x = mels[start:start + batch_size].to(device=param.device, dtype=param.dtype)
        content, style = model.encode(x)
        contents.append(content.values.cpu())
        styles.append(style.flatten().unsqueeze(-1).cpu())
    model.train(was_training)
    return torch.cat(contents), torch.cat(styles)


@torch.no_grad()
def _mean_l1(model: AgainVC, mels: torch.Tensor, batch_size: int = 64) -> float:
    was_training = model.training
    model.eval()
    param = next(model.parameters())
    total, count = 0.0, 0
    for start in range(0, len(mels), batch_size):
        x = mels[start:start + batch_size].to(device=param.device, dtype=param.dtype)
        total += float((model.reconstruct(x) - x).abs().sum(dtype=torch.float64))
        count += x.numel()
    model.train(was_training)
    return total / count


def train_content_probe(
    model: Union[AgainVC, str, Path],
    index: CorpusIndex,
    config: Optional[ProbeConfig] = None,
    store: Optional[MelStore] = None,
) -> ProbeResult:
    """Speaker classifier on frozen, post-activation content embeddings."""
    config = config or ProbeConfig()
    model = _resolve_model(model)
    train, held_out, speakers = build_probe_splits(index, config, store, model.config.segment_length)
    train_c, _ = extract_embeddings(model, train.mels)
    eval_c, _ = extract_embeddings(model, held_out.mels)
    return fit_probe(train_c, train.labels, eval_c, held_out.labels, len(speakers), config)


def train_style_probe(
    model: Union[AgainVC, str, Path],
    index: CorpusIndex,
    config: Optional[ProbeConfig] = None,
    store: Optional[MelStore] = None,
) -> ProbeResult:
    """Speaker classifier on frozen style statistics flattened into a single frame."""
    config = config or ProbeConfig()
    model = _resolve_model(model)
    train, held_out, speakers = build_probe_splits(index, config, store, model.config.segment_length)
    _, train_s = extract_embeddings(model, train.mels)
    _, eval_s = extract_embeddings(model, held_out.mels)
    return fit_probe(train_s, train.labels, eval_s, held_out.labels, len(speakers), config)


def reconstruction_error(
    model: Union[AgainVC, str, Path],
    index: CorpusIndex,
    config: Optional[ProbeConfig] = None,
    store: Optional[MelStore] = None,
) -> float:
    """Mean L1 loss over the seeded held-out segments of training speakers."""
    config = config or ProbeConfig()
    model = _resolve_model(model)
    _, held_out, _ = build_probe_splits(index, config, store, model.config.segment_length)
    return _mean_l1(model, held_out.mels)


def evaluate_model(
    model: Union[AgainVC, str, Path],
    index: CorpusIndex,
    config: Optional[ProbeConfig] = None,
    store: Optional[MelStore] = None,
    seed: int = 0,
) -> ProbeReport:
    """Both probes and the reconstruction error from one shared split and one embedding pass."""
    config = config or ProbeConfig()
    model = _resolve_model(model)
    train, held_out, speakers = build_probe_splits(index, config, store, model.config.segment_length)
    train_c, train_s = extract_embeddings(model, train.mels)
    eval_c, eval_s = extract_embeddings(model, held_out.mels)

    content = fit_probe(train_c, train.labels, eval_c, held_out.labels, len(speakers), config)
    style = fit_probe(train_s, train.labels, eval_s, held_out.labels, len(speakers), config)
    rec = _mean_l1(model, held_out.mels)

    spec = model.config.activation
    report = ProbeReport(
        activation=spec.kind,
        alpha=spec.effective_alpha,
        bottleneck=model.config.bottleneck_channels,
        variant=model.config.variant,
        seed=seed,
        acc_content=content.accuracy,
        acc_style=style.accuracy,
        rec_error=rec,
        param_count=parameter_count(model),
        n_speakers=len(speakers),
        chance=content.chance,
        flagged=content.accuracy > config.flag_threshold,
        fingerprint=fingerprint({"model": model.config.model_dump(mode="json"), "probe": config.model_dump(mode="json")}),
    )
    logger.info(
        f"{VARIANT_LABELS[report.variant]} {spec.label} C_b={report.bottleneck}: "
        f"acc_C {report.acc_content:.1f}% acc_S {report.acc_style:.1f}% rec {report.rec_error:.4f} "
        f"(chance {report.chance:.1f}%)"
    )
    return report


@dataclass
class GridTask:
    index: CorpusIndex
    model_config: ModelConfig
    train_config: TrainConfig
    probe_config: ProbeConfig
    out_dir: Path
    seed: int


def point_name(config: ModelConfig, seed: int) -> str:
    return f"{config.variant}_{config.activation.label.replace(':', '-')}_cb{config.bottleneck_channels}_seed{seed}"


def _run_grid_task(task: GridTask) -> ProbeReport:
    spec = task.model_config.activation
    try:
        result = run_training(task.index, task.model_config, task.train_config, task.out_dir)
        return evaluate_model(result.model, task.index, task.probe_config, seed=task.seed)
    except DivergenceError as e:
        logger.warning(f"Grid point {task.out_dir.name} diverged: {str(e)}")
        return ProbeReport(
            activation=spec.kind,
            alpha=spec.effective_alpha,
            bottleneck=task.model_config.bottleneck_channels,
            variant=task.model_config.variant,
            seed=task.seed,
            param_count=parameter_count(AgainVC(task.model_config)),
            status="diverged",
            error=str(e),
        )


def build_tasks(
    points: Sequence[ModelConfig],
    index: CorpusIndex,
    train_config: TrainConfig,
    probe_config: ProbeConfig,
    out_dir: Path,
    seeds: Sequence[int],
) -> List[GridTask]:
    """One task per (model config, seed); the seed drives init, batching and probing alike."""
    tasks = []
    for seed in seeds:
        for config in points:
            seeded = config.updated(seed=seed)
            tasks.append(GridTask(
                index=index,
                model_config=seeded,
                train_config=train_config.model_copy(update={"seed": seed}),
                probe_config=probe_config.model_copy(update={"seed": seed}),
                out_dir=out_dir / point_name(seeded, seed),
                seed=seed,
            ))
    return tasks


def run_tasks(tasks: Sequence[GridTask], jobs: int = 1) -> List[ProbeReport]:
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_grid_task(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=jobs, mp_context=multiprocessing.get_context("spawn")) as executor:
        return list(executor.map(_run_grid_task, tasks))


def reports_frame(reports: Sequence[ProbeReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in reports])


def summarize_reports(reports: Sequence[ProbeReport]) -> pd.DataFrame:
    """Mean and standard deviation over seeds for each grid point (diverged runs excluded)."""
    frame = reports_frame([r for r in reports if r.status == "ok"])
    if frame.empty:
        return frame
    frame["alpha"] = frame["alpha"].fillna(-1.0)
    grouped = frame.groupby(["variant", "activation", "alpha", "bottleneck"], sort=False)
    summary = grouped.agg(
        acc_C=("acc_C", "mean"),
        acc_C_std=("acc_C", "std"),
        acc_S=("acc_S", "mean"),
        acc_S_std=("acc_S", "std"),
        rec=("rec", "mean"),
        rec_std=("rec", "std"),
        params=("params", "first"),
        chance=("chance", "first"),
        n_seeds=("seed", "count"),
    ).reset_index()
    summary["alpha"] = summary["alpha"].where(summary["alpha"] >= 0)
    return summary


def plot_tradeoff(reports: Sequence[ProbeReport], path: Union[str, Path], flag_threshold: float = 70.0) -> Path:
    """Scatter of reconstruction error against content-probe accuracy, one colour per activation."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    summary = summarize_reports(reports)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    if not summary.empty:
        summary["label"] = [
            f"sigmoid({a:g})" if act == "sigmoid" else act
            for act, a in zip(summary["activation"], summary["alpha"])
        ]
        for label, group in summary.groupby("label", sort=False):
            ax.plot(group["rec"], group["acc_C"], marker="o", linestyle="-", label=label)
            for _, row in group.iterrows():
                ax.annotate(str(int(row["bottleneck"])), (row["rec"], row["acc_C"]), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.axhline(flag_threshold, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("reconstruction error (L1)")
    ax.set_ylabel("speaker accuracy on content (%)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def write_reports(reports: Sequence[ProbeReport], out_dir: Union[str, Path], stem: str) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = reports_frame(reports)
    csv_path = out_dir / f"{stem}.csv"
    columns = SWEEP_COLUMNS + [c for c in frame.columns if c not in SWEEP_COLUMNS]
    frame[columns].to_csv(csv_path, index=False)
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps([r.model_dump(mode="json") for r in reports], indent=2, sort_keys=True))
    summary_path = out_dir / f"{stem}_summary.csv"
    summarize_reports(reports).to_csv(summary_path, index=False)
    return {"csv": csv_path, "json": json_path, "summary": summary_path}


def run_sweep(
    grid: SweepGrid,
    index: CorpusIndex,
    out_dir: Union[str, Path],
    model_config: Optional[ModelConfig] = None,
    train_config: Optional[TrainConfig] = None,
    probe_config: Optional[ProbeConfig] = None,
    seeds: Sequence[int] = (0,),
    jobs: int = 1,
) -> List[ProbeReport]:
    """Train and probe one model per (activation, bottleneck, seed); write CSV, JSON, summary and plot.

    A diverged point is recorded with status "diverged" and the sweep continues.
    """
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    probe_config = probe_config or ProbeConfig()
    out_dir = Path(out_dir)

    points = [model_config.updated(activation=spec, bottleneck_channels=size) for spec, size in grid.points()]
    tasks = build_tasks(points, index, train_config, probe_config, out_dir / "runs", seeds)
    logger.info(f"Sweep: {len(points)} grid points x {len(seeds)} seeds, {jobs} job(s)")
    reports = run_tasks(tasks, jobs)

    paths = write_reports(reports, out_dir, "sweep")
    plot_tradeoff(reports, out_dir / "sweep.png", probe_config.flag_threshold)
    logger.info(f"Sweep results written to {paths['csv']}")
    return reports


def compare_encoder_variants(
    index: CorpusIndex,
    out_dir: Union[str, Path],
    model_config: Optional[ModelConfig] = None,
    train_config: Optional[TrainConfig] = None,
    probe_config: Optional[ProbeConfig] = None,
    seeds: Sequence[int] = (0,),
    jobs: int = 1,
) -> pd.DataFrame:
    """Single vs dual encoder, each without and with sigmoid(0.1) guidance, under one training budget."""
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    probe_config = probe_config or ProbeConfig()
    out_dir = Path(out_dir)

    rows = [
        ("1-Enc", "single_encoder", ActivationSpec(kind="none")),
        ("2-Enc", "dual_encoder", ActivationSpec(kind="none")),
        ("1-Enc-sig", "single_encoder", ActivationSpec(kind="sigmoid", alpha=0.1)),
        ("2-Enc-sig", "dual_encoder", ActivationSpec(kind="sigmoid", alpha=0.1)),
    ]
    points = [model_config.updated(variant=variant, activation=spec) for _, variant, spec in rows]
    tasks = build_tasks(points, index, train_config, probe_config, out_dir / "runs", seeds)
    reports = run_tasks(tasks, jobs)
    write_reports(reports, out_dir, "compare_runs")

    table = []
    for name, variant, spec in rows:
        matching = [
            r for r in reports
            if r.variant == variant and r.activation == spec.kind and r.alpha == spec.effective_alpha and r.status == "ok"
        ]
        table.append({
            "model": name,
            "acc_C": float(np.mean([r.acc_content for r in matching])) if matching else math.nan,
            "acc_S": float(np.mean([r.acc_style for r in matching])) if matching else math.nan,
            "rec": float(np.mean([r.rec_error for r in matching])) if matching else math.nan,
            "params": parameter_count(AgainVC(model_config.updated(variant=variant, activation=spec))),
            "n_seeds": len(matching),
        })
    frame = pd.DataFrame(table)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / "compare.csv", index=False)
    (out_dir / "compare.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    logger.info(f"Encoder comparison written to {out_dir / 'compare.csv'}")
    return frame
