"""End-to-end experiments: multi-task fine-tuning, K-shot adaptation, eval.

An experiment plan names source bundles, a target bundle, the tasks to
evaluate, the shot count, text mode, ablation switches and seeds. Running
it builds corpora, fits the vocabulary, fine-tunes on the shuffled union
of all source entries, adapts on K labeled target examples per class and
reports micro/macro F1 (plus AUC/AP for link prediction) averaged over
seeds. Reports carry no timestamps so identical runs are byte-identical.
"""

from __future__ import annotations

import json
import sys
import warnings
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import corpus as corpus_mod
from .corpus import MaskedEntry, TaskSpec, bracket_label
from .errors import DataError
from .graph import derive_seed
from .ingest import load_bundle
from .metrics import auc_ap, micro_macro_f1, per_class_report
from .model import (
    Batch,
    ModelConfig,
    ModelState,
    TrainConfig,
    backward,
    clip_gradients,
    constrained_log_probs,
    forward,
    init_state,
    optimizer_step,
)
from .textualize import TextMode
from .tokenizer import TokenizedEntry, Vocab, build_vocab, encode

PAPER_SHOT_COUNTS = (0, 1, 5, 20, 40)

REPORT_SCHEMA = "v1"


@dataclass
class AblationFlags:
    no_finetune: bool = False
    single_task: bool = False
    no_metapath: bool = False
    no_constraint: bool = False


@dataclass
class ExperimentPlan:
    name: str
    source_bundles: list[str]
    target_bundle: str
    tasks: tuple[str, ...] = ("nc", "lp")
    shots: int = 0
    mode: TextMode = TextMode.BOTH
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    ablations: AblationFlags = field(default_factory=AblationFlags)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: dict = field(default_factory=dict)
    instances_per_metapath: int = 3
    negative_ratio: float = 1.0
    max_length: int = 512
    min_count: int = 1

    def __post_init__(self):
        if self.shots < 0:
            raise DataError("shots must be >= 0")
        if self.shots not in PAPER_SHOT_COUNTS:
            warnings.warn(
                f"shots={self.shots} is outside the evaluation protocol counts {PAPER_SHOT_COUNTS}",
                stacklevel=2,
            )
        for t in self.tasks:
            if t not in (corpus_mod.TASK_NC, corpus_mod.TASK_LP):
                raise DataError(f"unknown task {t!r}")
        target = Path(self.target_bundle).resolve()
        if any(Path(b).resolve() == target for b in self.source_bundles):
            raise DataError("target bundle must not appear among the source bundles")


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    base = path.parent
    plan = data.get("plan", {})
    abl = data.get("ablations", {})
    train = data.get("train", {})
    return ExperimentPlan(
        name=plan.get("name", path.stem),
        source_bundles=[str(base / b) for b in data["sources"]["bundles"]],
        target_bundle=str(base / data["target"]["bundle"]),
        tasks=tuple(plan.get("tasks", ["nc", "lp"])),
        shots=int(plan.get("shots", 0)),
        mode=TextMode(plan.get("mode", "both")),
        seeds=tuple(plan.get("seeds", [0, 1, 2, 3, 4])),
        ablations=AblationFlags(**abl),
        train=TrainConfig(**train),
        model=dict(data.get("model", {})),
        instances_per_metapath=int(plan.get("instances_per_metapath", 3)),
        negative_ratio=float(plan.get("negative_ratio", 1.0)),
        max_length=int(plan.get("max_length", 512)),
        min_count=int(plan.get("min_count", 1)),
    )


# --- corpus assembly --------------------------------------------------------


def build_bundle_entries(bundle_path, tasks, k, seed, mode, negative_ratio=1.0, no_metapath=False):
    """All task entries for one bundle, keyed by task kind."""
    graph, labels, metapaths, manifest = load_bundle(bundle_path)
    out: dict[str, list[MaskedEntry]] = {}
    if corpus_mod.TASK_NC in tasks:
        spec = TaskSpec(corpus_mod.TASK_NC, manifest.dataset_name, list(manifest.category_labels))
        entries = corpus_mod.build_nc_entries(
            graph, labels, spec, metapaths, k, seed, mode, no_metapath=no_metapath
        )
        out[corpus_mod.TASK_NC] = [corpus_mod.mask_entry(e) for e in entries]
    if corpus_mod.TASK_LP in tasks:
        edge_names = [graph.edge_type_names[i] for i in sorted(graph.edge_type_names)]
        spec = TaskSpec(
            corpus_mod.TASK_LP,
            manifest.dataset_name,
            edge_names + [corpus_mod.NO_EDGE_LABEL],
            negative_ratio=negative_ratio,
        )
        entries = corpus_mod.build_lp_entries(
            graph, spec, metapaths, k, seed, mode, no_metapath=no_metapath
        )
        out[corpus_mod.TASK_LP] = [corpus_mod.mask_entry(e) for e in entries]
    return out


# --- training loops ----------------------------------------------------------


def finetune(state: ModelState, entries: list[TokenizedEntry], cfg: TrainConfig):
    """Train on the shuffled union of entries for cfg.epochs; returns loss log.

    epochs=0 leaves the state untouched. Batches interleave all tasks;
    shuffling is seeded and epoch-dependent, so runs are reproducible.
    """
    losses = []
    if cfg.epochs == 0 or not entries:
        return state, losses
    rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(entries))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(entries), cfg.batch_size):
            chunk = [entries[i] for i in order[start : start + cfg.batch_size]]
            batch = Batch.from_entries(chunk)
            loss, grads = backward(state, batch, train=True)
            clip_gradients(grads, cfg.grad_clip_norm)
            optimizer_step(state, grads, cfg)
            epoch_loss += loss
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return state, losses


def sample_shots(entries: list[MaskedEntry], k: int, seed: int):
    """Class-balanced K-shot split: (adaptation entries, held-out entries).

    Classes are the entry targets. Raises when any class has fewer than K
    examples, naming the class.
    """
    if k == 0:
        return [], list(entries)
    by_class: dict[str, list[MaskedEntry]] = {}
    for e in entries:
        by_class.setdefault(e.target, []).append(e)
    rng = np.random.default_rng(derive_seed(seed, "shots"))
    shots, shot_ids = [], set()
    for label in sorted(by_class):
        pool = by_class[label]
        if len(pool) < k:
            raise DataError(f"class {label!r} has only {len(pool)} labeled examples, need {k}")
        picks = rng.choice(len(pool), size=k, replace=False)
        for i in sorted(picks.tolist()):
            shots.append(pool[i])
            shot_ids.add(id(pool[i]))
    rest = [e for e in entries if id(e) not in shot_ids]
    return shots, rest


def adapt(state: ModelState, entries: list[MaskedEntry], k: int, vocab: Vocab, cfg: TrainConfig, max_length: int):
    """K-shot adaptation; K=0 returns the state unchanged (strict no-op)."""
    if k == 0:
        return state, [], list(entries)
    shots, rest = sample_shots(entries, k, cfg.seed)
    tokenized = [encode(e, vocab, max_length) for e in shots]
    state, _ = finetune(state, tokenized, cfg)
    return state, shots, rest


def predict(state: ModelState, entry: TokenizedEntry, vocab: Vocab, constrained: bool = True):
    """Label prediction at the mask position.

    constrained: argmax of the constrained log-probabilities (ties go to
    the lowest token id). Unconstrained: argmax over the full vocabulary;
    a non-label winner is returned verbatim (callers score it as wrong).
    Returns (token string, score vector over the entry's constrained ids).
    """
    batch = Batch.from_entries([entry])
    logits, _ = forward(state, batch, train=False)
    row = logits[0]
    log_probs = constrained_log_probs(row, entry.constrained_ids)
    if constrained:
        best = log_probs.max()
        winner = min(
            cid for cid, lp in zip(entry.constrained_ids, log_probs) if lp == best
        )
    else:
        full_best = row.max()
        winner = int(np.flatnonzero(row == full_best).min())
    return vocab.id_to_token[winner], np.exp(log_probs)


# --- experiment driver --------------------------------------------------------


def evaluate_entries(state, masked: list[MaskedEntry], vocab: Vocab, max_length: int, constrained=True):
    """Predict every entry; returns predictions, golds and LP existence scores."""
    preds, golds, scores, binary = [], [], [], []
    no_edge = bracket_label(corpus_mod.NO_EDGE_LABEL)
    for e in masked:
        tok = encode(e, vocab, max_length)
        label, probs = predict(state, tok, vocab, constrained=constrained)
        preds.append(label)
        golds.append(e.target)
        if e.task == corpus_mod.TASK_LP and no_edge in e.vocab:
            idx = e.vocab.index(no_edge)
            scores.append(1.0 - float(probs[idx]))
            binary.append(0 if e.target == no_edge else 1)
    return preds, golds, scores, binary


def run_experiment(plan: ExperimentPlan, checkpoint_dir=None) -> dict:
    """Fine-tune, adapt, predict and score per the plan; averaged over seeds."""
    per_seed = []
    for seed in plan.seeds:
        per_seed.append(_run_single(plan, int(seed), checkpoint_dir))
    report = {
        "schema_version": REPORT_SCHEMA,
        "plan": _plan_echo(plan),
        "per_seed": per_seed,
        "average": _average_metrics(per_seed, plan.tasks),
    }
    return report


def _run_single(plan: ExperimentPlan, seed: int, checkpoint_dir=None) -> dict:
    corpus_seed = derive_seed(seed, "corpus")
    source_tasks = tuple(plan.tasks) if plan.ablations.single_task else ("nc", "lp")
    source_entries: list[MaskedEntry] = []
    for bundle in plan.source_bundles:
        per_task = build_bundle_entries(
            bundle,
            source_tasks,
            plan.instances_per_metapath,
            corpus_seed,
            plan.mode,
            plan.negative_ratio,
            no_metapath=plan.ablations.no_metapath,
        )
        for task in sorted(per_task):
            source_entries.extend(per_task[task])
    target_by_task = build_bundle_entries(
        plan.target_bundle,
        plan.tasks,
        plan.instances_per_metapath,
        corpus_seed,
        plan.mode,
        plan.negative_ratio,
        no_metapath=plan.ablations.no_metapath,
    )

    all_texts = [e.text for e in source_entries]
    label_tokens = set()
    for e in source_entries:
        label_tokens.update(e.vocab)
    for task_entries in target_by_task.values():
        # Target text joins the vocabulary (stand-in for subword coverage);
        # its tokens stay untrained until adaptation.
        all_texts.extend(e.text for e in task_entries)
        for e in task_entries:
            label_tokens.update(e.vocab)
    vocab = build_vocab(all_texts, sorted(label_tokens), plan.min_count)

    model_cfg = ModelConfig(vocab_size=vocab.size, seed=seed, **plan.model)
    if plan.max_length > model_cfg.max_length:
        raise DataError("plan max_length exceeds the model's positional capacity")
    state = init_state(model_cfg)
    train_cfg = replace(plan.train, seed=seed)

    train_losses = []
    if not plan.ablations.no_finetune:
        tokenized = [encode(e, vocab, plan.max_length) for e in source_entries]
        state, train_losses = finetune(state, tokenized, train_cfg)

    # Sample every task's shots first, adapt once on their union, then score
    # each task on its held-out remainder.
    all_shots: list[MaskedEntry] = []
    eval_by_task: dict[str, list[MaskedEntry]] = {}
    for task in plan.tasks:
        entries = target_by_task.get(task, [])
        if not entries:
            continue
        shots, rest = sample_shots(entries, plan.shots, seed)
        all_shots.extend(shots)
        eval_by_task[task] = rest
    if all_shots:
        tokenized = [encode(e, vocab, plan.max_length) for e in all_shots]
        state, _ = finetune(state, tokenized, train_cfg)

    result = {"seed": seed, "train_losses": train_losses, "tasks": {}}
    for task in plan.tasks:
        eval_entries = eval_by_task.get(task, [])
        if not eval_entries:
            continue
        preds, golds, scores, binary = evaluate_entries(
            state, eval_entries, vocab, plan.max_length, constrained=not plan.ablations.no_constraint
        )
        class_set = list(eval_entries[0].vocab)
        micro, macro = micro_macro_f1(preds, golds, class_set)
        task_report = {
            "micro_f1": micro,
            "macro_f1": macro,
            "n_eval": len(eval_entries),
            "n_shots": len(all_shots),
            "per_class": per_class_report(preds, golds, class_set),
        }
        if task == corpus_mod.TASK_LP and len(set(binary)) == 2:
            auc, ap = auc_ap(scores, binary)
            task_report["auc"] = auc
            task_report["ap"] = ap
        result["tasks"][task] = task_report

    if checkpoint_dir is not None:
        from .model import save_checkpoint

        path = Path(checkpoint_dir) / f"{plan.name}.seed{seed}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, path)
    return result


def _plan_echo(plan: ExperimentPlan) -> dict:
    echo = asdict(plan)
    echo["mode"] = plan.mode.value
    echo["tasks"] = list(plan.tasks)
    echo["seeds"] = list(plan.seeds)
    return echo


def _average_metrics(per_seed, tasks) -> dict:
    avg = {}
    for task in tasks:
        rows = [r["tasks"][task] for r in per_seed if task in r["tasks"]]
        if not rows:
            continue
        keys = ["micro_f1", "macro_f1"] + (["auc", "ap"] if all("auc" in r for r in rows) else [])
        avg[task] = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    return avg


def write_report(report: dict, path):
    """Deterministic JSON (sorted keys, no timestamps)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
