"""Experiment configuration and the resumable teacher -> distill -> student pipeline.

Every stage writes plain files under the experiment directory and is skipped when its
outputs already exist. Models are always reloaded from their checkpoints before use, so a
resumed run sees exactly the float32 parameters a fresh run would.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .datamodel import (
    LabelSet,
    PairedDataset,
    SplitSpec,
    generate_synthetic,
    load_features,
    load_labels,
    make_split,
    save_features,
    save_labels,
)
from .distill import SIMILARITY_KINDS, RelevantPairSet, build_relevant_pairs, embed_all, pair_precision, select_pairs
from .embednet import TrainConfig, TrainingDivergedError, load_model, save_model
from .retrieval import DIRECTIONS, EvalReport, evaluate_cross_modal
from .student import STUDENT_KINDS, DistillConfig, train_student
from .teacher import STRATEGIES, train_teacher, write_loss_log

log = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
SUMMARY = "summary.csv"
PAIR_PRECISION = "pair_precision.csv"
DIAG_KINDS = SIMILARITY_KINDS + ("merged",)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _train_config(d: dict | None) -> TrainConfig:
    try:
        return TrainConfig(**(d or {}))
    except TypeError as err:
        raise ConfigError(f"bad training config: {err}") from err
    except ValueError as err:
        raise ConfigError(str(err)) from err


@dataclass
class ExperimentConfig:
    output_dir: str
    synthetic: dict | None = None
    features: str | None = None
    labels: str | None = None
    query_fraction: float = 0.2
    split_seed: int = 0
    teacher: TrainConfig = field(default_factory=TrainConfig)
    k_teacher: int = 32
    teacher_strategy: str = "uniform"
    distill: DistillConfig = field(default_factory=DistillConfig)
    student_kinds: tuple[str, ...] = STUDENT_KINDS
    student: TrainConfig = field(default_factory=TrainConfig)
    k_student: tuple[int, ...] = (16,)
    generations: int = 1
    baseline: bool = True
    eval_k: tuple[int, ...] = (1, 10, 100, 500)
    curve_points: int = 20
    precision_at: int = 200

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> ExperimentConfig:
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "output_dir" not in d:
            raise ConfigError("config needs output_dir")
        base = Path(base_dir) if base_dir is not None else None
        for key in ("output_dir", "features", "labels"):
            if d.get(key) is not None and base is not None and not Path(d[key]).is_absolute():
                d[key] = str(base / d[key])
        d["teacher"] = _train_config(d.get("teacher"))
        d["student"] = _train_config(d.get("student"))
        try:
            d["distill"] = DistillConfig(**(d.get("distill") or {}))
        except TypeError as err:
            raise ConfigError(f"bad distill config: {err}") from err
        for key in ("student_kinds", "k_student", "eval_k"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not valid JSON ({err})") from err
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("student_kinds", "k_student", "eval_k"):
            d[key] = list(d[key])
        return d

    def validate(self) -> None:
        if (self.synthetic is None) == (self.features is None):
            raise ConfigError("give exactly one of 'synthetic' or 'features'")
        if self.features is not None:
            for p in (self.features, self.labels):
                if p is not None and not Path(p).is_file():
                    raise ConfigError(f"file not found: {p}")
        if not 0 < self.query_fraction < 1:
            raise ConfigError("query_fraction must lie in (0, 1)")
        if self.teacher_strategy not in STRATEGIES:
            raise ConfigError(f"teacher_strategy must be one of {STRATEGIES}")
        bad = [k for k in self.student_kinds if k not in STUDENT_KINDS]
        if bad or not self.student_kinds:
            raise ConfigError(f"student_kinds must be a non-empty subset of {STUDENT_KINDS}")
        if not self.k_student or min(self.k_student) < 1 or self.k_teacher < 1:
            raise ConfigError("code lengths must be >= 1")
        if self.generations < 0:
            raise ConfigError("generations must be >= 0")
        if self.distill.k_img < 0 or self.distill.k_txt < 0 or self.distill.k_img + self.distill.k_txt == 0:
            raise ConfigError("k_img and k_txt must be >= 0 and not both zero")
        if self.distill.per_instance_k is not None and self.distill.per_instance_k < 1:
            raise ConfigError("per_instance_k must be >= 1")
        if self.precision_at < 1:
            raise ConfigError("precision_at must be >= 1")
        n = self.n_train()
        if n is not None:
            if max(self.distill.k_img, self.distill.k_txt) > n - 1:
                raise ConfigError(f"k_img/k_txt exceed the {n - 1} neighbours available")
            if self.distill.budget is not None and not 1 <= self.distill.budget <= n * (n - 1):
                raise ConfigError(f"budget {self.distill.budget} outside [1, N(N-1) = {n * (n - 1)}]")
        if self.k_teacher < max(self.k_student):
            warnings.warn(
                f"teacher code length {self.k_teacher} is shorter than student length {max(self.k_student)}",
                stacklevel=2,
            )

    def n_total(self) -> int | None:
        if self.synthetic is not None:
            return int(self.synthetic.get("n_pairs", 0))
        return None

    def n_train(self) -> int | None:
        n = self.n_total()
        return None if n is None else n - self.n_query(n)

    def n_query(self, n: int) -> int:
        return max(1, int(round(self.query_fraction * n)))


# ---------------------------------------------------------------------------
# stage helpers


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _stage(name: str, outputs, fn):
    """Run ``fn`` unless every output exists. Failures are wrapped with the stage name."""
    if all(Path(p).exists() for p in outputs):
        log.info("stage %s: up to date", name)
        return False
    log.info("stage %s: running", name)
    try:
        fn()
    except (TrainingDivergedError, ValueError, OSError, ArithmeticError) as err:
        raise StageError(name, err) from err
    return True


@dataclass
class _Ctx:
    root: Path
    cfg: ExperimentConfig
    dataset: PairedDataset
    labels: LabelSet | None
    split: SplitSpec
    train: PairedDataset
    records: list = field(default_factory=list)

    def rel(self, p: Path) -> str:
        return p.relative_to(self.root).as_posix()


def _prepare_data(root: Path, cfg: ExperimentConfig):
    data = root / "data"
    data.mkdir(parents=True, exist_ok=True)
    feat, lab, spl = data / "features.ukdf", data / "labels.ukdl", data / "split.json"

    def make_data():
        if cfg.synthetic is not None:
            ds, labels = generate_synthetic(**cfg.synthetic)
        else:
            ds = load_features(cfg.features)
            labels = load_labels(cfg.labels) if cfg.labels else None
            if labels is not None and labels.n != ds.n:
                raise ValueError(f"labels cover {labels.n} rows, features {ds.n}")
        save_features(ds, feat)
        if labels is not None:
            save_labels(labels, lab)
        split = make_split(ds.n, cfg.n_query(ds.n), cfg.split_seed)
        _write_json(spl, split.to_dict())

    _stage("data", [feat, spl], make_data)
    ds = load_features(feat)
    labels = load_labels(lab) if lab.exists() else None
    split = SplitSpec.from_dict(json.loads(spl.read_text()))
    split.validate(ds.n)
    n = len(split.retrieval_indices)
    if cfg.distill.budget is not None and cfg.distill.budget > n * (n - 1):
        raise ConfigError(f"budget {cfg.distill.budget} exceeds N(N-1) = {n * (n - 1)}")
    return ds, labels, split


def _evaluate(ctx: _Ctx, model_path: Path, stem: Path) -> dict[str, str]:
    """Write one EvalReport per direction next to the checkpoint; returns their paths."""
    if ctx.labels is None:
        return {}
    paths = {d: stem.with_name(f"{stem.name}_{d}.json") for d in DIRECTIONS}

    def run():
        model = load_model(model_path)
        for d, p in paths.items():
            rep = evaluate_cross_modal(model, ctx.dataset, ctx.labels, ctx.split, d, ctx.cfg.eval_k, ctx.cfg.curve_points)
            rep.write(p, p.with_name(p.stem + "_curve.csv"))

    _stage(f"eval:{ctx.rel(stem)}", list(paths.values()), run)
    return {d: ctx.rel(p) for d, p in paths.items()}


def _pair_diagnostics(ctx: _Ctx, model_path: Path, out: Path) -> str | None:
    """Label-oracle precision of the top pairs under every similarity kind and the merge."""
    if ctx.labels is None:
        return None

    def run():
        model = load_model(model_path)
        emb_img, emb_txt = embed_all(model, ctx.train)
        train_labels = ctx.labels.subset(ctx.split.retrieval_indices)
        kk = max(ctx.cfg.distill.k_img, ctx.cfg.distill.k_txt)
        sets = {kind: select_pairs(kind, ctx.train, kk, emb_img, emb_txt) for kind in SIMILARITY_KINDS}
        sets["merged"] = build_relevant_pairs(model, ctx.train, ctx.cfg.distill.k_img, ctx.cfg.distill.k_txt)
        at = ctx.cfg.precision_at
        res = {kind: pair_precision(p, train_labels, min(at, len(p))) for kind, p in sets.items()}
        _write_json(out, {"precision_at": at, "precision": res})

    _stage(f"diagnostics:{ctx.rel(out)}", [out], run)
    return ctx.rel(out)


def _record(ctx: _Ctx, **fields) -> dict:
    rec = {"generation": None, "role": None, "kind": None, "k_bits": None, "checkpoint": None,
           "loss_log": None, "pairs": None, "parent": None, "eval": {}, "pair_precision": None}
    rec.update(fields)
    ctx.records.append(rec)
    _write_json_lines(ctx.root / MANIFEST, ctx.records)
    return rec


def _write_json_lines(path: Path, records) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _train_stage(ctx: _Ctx, name: str, ckpt: Path, fit) -> Path:
    loss_path = ckpt.with_suffix(".loss.csv")

    def run():
        model = fit()
        save_model(model, ckpt)
        write_loss_log(model, loss_path)

    _stage(name, [ckpt, loss_path], run)
    return loss_path


def run_pipeline(cfg: ExperimentConfig) -> list[dict]:
    """Execute (or resume) the full experiment; returns the manifest records."""
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    # output_dir is left out so the same config reproduces identical files anywhere
    _write_json(root / "config.json", {k: v for k, v in cfg.to_dict().items() if k != "output_dir"})
    ds, labels, split = _prepare_data(root, cfg)
    ctx = _Ctx(root, cfg, ds, labels, split, ds.subset(split.retrieval_indices))

    gen0 = root / "gen0"
    gen0.mkdir(exist_ok=True)
    t_ckpt = gen0 / f"teacher_k{cfg.k_teacher}.ukdm"
    t_loss = _train_stage(
        ctx, "teacher", t_ckpt,
        lambda: train_teacher(ctx.train, cfg.teacher, cfg.teacher_strategy, cfg.k_teacher),
    )
    _record(
        ctx, generation=0, role="teacher", kind="teacher", k_bits=cfg.k_teacher,
        checkpoint=ctx.rel(t_ckpt), loss_log=ctx.rel(t_loss),
        eval=_evaluate(ctx, t_ckpt, gen0 / f"teacher_k{cfg.k_teacher}"),
        pair_precision=_pair_diagnostics(ctx, t_ckpt, gen0 / f"teacher_k{cfg.k_teacher}_pairs_precision.json"),
    )

    for k in cfg.k_student:
        if cfg.baseline and k != cfg.k_teacher:
            b_ckpt = gen0 / f"baseline_k{k}.ukdm"
            b_loss = _train_stage(
                ctx, f"baseline:k{k}", b_ckpt,
                lambda k=k: train_teacher(ctx.train, cfg.teacher, cfg.teacher_strategy, k),
            )
            _record(
                ctx, generation=0, role="baseline", kind="teacher", k_bits=k,
                checkpoint=ctx.rel(b_ckpt), loss_log=ctx.rel(b_loss),
                eval=_evaluate(ctx, b_ckpt, gen0 / f"baseline_k{k}"),
            )

    for kind in cfg.student_kinds:
        for k in cfg.k_student:
            parent = t_ckpt
            for g in range(1, cfg.generations + 1):
                gdir = root / f"gen{g}"
                gdir.mkdir(exist_ok=True)
                stem = f"{kind}_k{k}"
                pairs_path = gdir / f"{stem}_pairs.csv"

                def distill(parent=parent, pairs_path=pairs_path, kind=kind):
                    dc = cfg.distill
                    pairs = build_relevant_pairs(load_model(parent), ctx.train, dc.k_img, dc.k_txt, **dc.for_kind(kind))
                    tmp = pairs_path.with_suffix(".tmp")
                    pairs.to_csv(tmp)
                    os.replace(tmp, pairs_path)

                _stage(f"distill:gen{g}:{stem}", [pairs_path], distill)
                ckpt = gdir / f"{stem}.ukdm"
                loss = _train_stage(
                    ctx, f"student:gen{g}:{stem}", ckpt,
                    lambda kind=kind, k=k, pairs_path=pairs_path: train_student(
                        kind, ctx.train, RelevantPairSet.from_csv(pairs_path), cfg.student, k
                    ),
                )
                diag = None
                if g < cfg.generations:
                    diag = _pair_diagnostics(ctx, ckpt, gdir / f"{stem}_pairs_precision.json")
                _record(
                    ctx, generation=g, role="student", kind=kind, k_bits=k,
                    checkpoint=ctx.rel(ckpt), loss_log=ctx.rel(loss), pairs=ctx.rel(pairs_path),
                    parent=ctx.rel(parent), eval=_evaluate(ctx, ckpt, gdir / stem), pair_precision=diag,
                )
                parent = ckpt

    write_report(root)
    return ctx.records


# ---------------------------------------------------------------------------
# reporting


def read_manifest(root) -> list[dict]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{path}: no manifest")
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}:{n}: corrupt manifest line ({err})") from err
        if not isinstance(rec, dict) or not {"generation", "role", "kind", "k_bits", "eval"} <= set(rec):
            raise ValueError(f"{path}:{n}: manifest record missing required fields")
        records.append(rec)
    return records


def summary_rows(root) -> tuple[list[str], list[list]]:
    root = Path(root)
    records = read_manifest(root)
    reports = []
    for rec in records:
        for d in sorted(rec["eval"]):
            reports.append((rec, EvalReport.from_dict(json.loads((root / rec["eval"][d]).read_text()))))
    ks = sorted({k for _, r in reports for k in r.precision_at})
    header = ["generation", "role", "kind", "k_bits", "direction", "map"] + [f"p@{k}" for k in ks]
    rows = []
    for rec, r in reports:
        rows.append(
            [rec["generation"], rec["role"], rec["kind"], rec["k_bits"], r.direction, repr(r.map)]
            + [repr(r.precision_at[k]) if k in r.precision_at else "" for k in ks]
        )
    return header, rows


def pair_precision_rows(root) -> tuple[list[str], list[list]]:
    root = Path(root)
    header = ["generation", "source_kind", "k_bits", "precision_at"] + list(DIAG_KINDS)
    rows = []
    for rec in read_manifest(root):
        if not rec.get("pair_precision"):
            continue
        d = json.loads((root / rec["pair_precision"]).read_text())
        rows.append(
            [rec["generation"], rec["kind"], rec["k_bits"], d["precision_at"]]
            + [repr(d["precision"][k]) for k in DIAG_KINDS]
        )
    return header, rows


def write_report(root) -> tuple[Path, Path]:
    """Render summary.csv (one row per generation, kind, K and direction) and pair_precision.csv."""
    root = Path(root)
    out = []
    for name, fn in ((SUMMARY, summary_rows), (PAIR_PRECISION, pair_precision_rows)):
        header, rows = fn(root)
        with open(root / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        out.append(root / name)
    return out[0], out[1]


def record_map(records: list[dict], root, role: str, kind: str, k_bits: int, generation: int) -> dict[str, float]:
    """mAP per direction of the single manifest record matching the filters."""
    root = Path(root)
    hits = [
        r for r in records
        if r["role"] == role and r["kind"] == kind and r["k_bits"] == k_bits and r["generation"] == generation
    ]
    if len(hits) != 1:
        raise KeyError(f"expected one record for {role}/{kind}/k{k_bits}/gen{generation}, found {len(hits)}")
    return {d: json.loads((root / p).read_text())["map"] for d, p in hits[0]["eval"].items()}
