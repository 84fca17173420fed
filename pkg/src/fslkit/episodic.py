"""Patient-disjoint episode sampling, episodic training and evaluation,
cross-validation orchestration, and accuracy aggregation.

Per-episode RNG streams are derived from (base seed, phase, fold, episode
index), so evaluation episodes can run in any order or in parallel without
changing results.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .datamodel import Dataset, filter_by_patients, make_folds, validate_dataset
from .diffcore import AdamState, adam_step
from .heads import (
    HEAD_IDS,
    AdapterParams,
    RelationParams,
    UnknownHead,
    episode_loss,
    episode_scores,
    pack_params,
    unpack_params,
)

_PHASE_TRAIN = 0
_PHASE_EVAL = 1


class InfeasibleEpisode(ValueError):
    """No patient partition can satisfy the episode's support/query demands."""


class NotEnoughPatients(ValueError):
    pass


class ReportFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    """Episode shape: way classes, shot support and up to `query` queries per class."""

    way: int = 2
    shot: int = 5
    query: int = 10
    num_query_patients: int = 1

    def __post_init__(self):
        if self.way < 2:
            raise ValueError("way must be >= 2")
        if self.shot < 1:
            raise ValueError("shot must be >= 1")
        if self.query < 1:
            raise ValueError("query must be >= 1")
        if self.num_query_patients < 1:
            raise ValueError("num_query_patients must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    """Episodic training/evaluation protocol constants.

    `augment` is carried for image-backed pipelines; training over
    pre-computed embeddings has no image transform to apply and ignores it.
    """

    train_episodes: int = 500
    eval_episodes: int = 500
    learning_rate: float = 1e-4
    seed: int = 0
    augment: bool = False
    adapter_dim: int | None = None
    adapter_bias: bool = True
    relation_hidden: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.train_episodes < 1 or self.eval_episodes < 1:
            raise ValueError("episode counts must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


@dataclass(frozen=True)
class Episode:
    """One sampled few-shot task; support and query patients never overlap."""

    support_vectors: np.ndarray
    support_labels: np.ndarray
    query_vectors: np.ndarray
    query_labels: np.ndarray
    support_patients: frozenset
    query_patients: frozenset
    way: int
    classes: tuple[int, ...]  # original dataset labels, index = episode label

    def __post_init__(self):
        if self.support_patients & self.query_patients:
            raise ValueError("support and query patients overlap")


class EpisodeSampler:
    """Reusable sampler over one dataset (index structures built once).

    Query patients are drawn uniformly from the feasible choices in
    `query_pool`, support frames from the remaining patients (or from a
    disjoint `support_pool` when evaluating across a fold boundary).
    """

    def __init__(
        self,
        dataset: Dataset,
        cfg: EpisodeConfig,
        query_pool: Iterable[str] | None = None,
        support_pool: Iterable[str] | None = None,
    ):
        report = validate_dataset(dataset)
        if not report.ok:
            raise ValueError(f"dataset invalid: {report.violations[0].detail}")
        self.dataset = dataset
        self.cfg = cfg
        self._vectors = dataset.vectors.astype(np.float64)

        patients = dataset.patients
        self.query_pool = tuple(sorted(set(query_pool) if query_pool is not None else patients))
        self.support_pool = tuple(
            sorted(set(support_pool) if support_pool is not None else patients)
        )
        unknown = (set(self.query_pool) | set(self.support_pool)) - set(patients)
        if unknown:
            raise ValueError(f"pool names unknown patients: {sorted(unknown)}")

        classes = sorted(set(int(l) for l in dataset.labels))
        if cfg.way > len(classes):
            raise InfeasibleEpisode(
                f"way={cfg.way} but dataset has {len(classes)} classes"
            )
        self._present_classes = classes

        # per (patient, class) record index arrays
        self._idx: dict[str, dict[int, np.ndarray]] = {p: {} for p in patients}
        by_key: dict[tuple[str, int], list[int]] = {}
        for i, rec in enumerate(dataset.records):
            by_key.setdefault((rec.patient_id, rec.label), []).append(i)
        for (pid, label), rows in by_key.items():
            self._idx[pid][label] = np.array(rows, dtype=np.int64)

        self._class_sets = self._feasible_class_sets()
        if not self._class_sets:
            raise InfeasibleEpisode(
                "no class subset admits a patient partition with "
                f"shot={cfg.shot} support and >=1 query frame per class "
                "from disjoint patients"
            )

    def _count(self, pid: str, label: int) -> int:
        rows = self._idx[pid].get(label)
        return 0 if rows is None else len(rows)

    def _query_candidates(self, class_set: tuple[int, ...]) -> list[tuple[str, ...]]:
        """All feasible query patient sets for the given classes, sorted."""
        support_total = {
            c: sum(self._count(p, c) for p in self.support_pool) for c in class_set
        }
        m = self.cfg.num_query_patients
        support_set = set(self.support_pool)
        candidates = []
        for combo in itertools.combinations(self.query_pool, m):
            ok = True
            for c in class_set:
                if sum(self._count(p, c) for p in combo) < 1:
                    ok = False
                    break
                remaining = support_total[c] - sum(
                    self._count(p, c) for p in combo if p in support_set
                )
                if remaining < self.cfg.shot:
                    ok = False
                    break
            if ok:
                candidates.append(combo)
        return candidates

    def _feasible_class_sets(self) -> list[tuple[tuple[int, ...], list[tuple[str, ...]]]]:
        out = []
        for class_set in itertools.combinations(self._present_classes, self.cfg.way):
            cands = self._query_candidates(class_set)
            if cands:
                out.append((class_set, cands))
        return out

    def sample(self, rng: np.random.Generator) -> Episode:
        class_set, candidates = self._class_sets[
            rng.integers(len(self._class_sets)) if len(self._class_sets) > 1 else 0
        ]
        query_patients = candidates[
            rng.integers(len(candidates)) if len(candidates) > 1 else 0
        ]
        q_set = set(query_patients)
        support_patients = [p for p in self.support_pool if p not in q_set]

        sup_rows, sup_labels = [], []
        for episode_label, c in enumerate(class_set):
            pool = [self._idx[p][c] for p in support_patients if c in self._idx[p]]
            pool = np.concatenate(pool) if pool else np.empty(0, dtype=np.int64)
            pick = rng.choice(len(pool), size=self.cfg.shot, replace=False)
            sup_rows.append(pool[np.sort(pick)])
            sup_labels.extend([episode_label] * self.cfg.shot)

        qry_rows, qry_labels = [], []
        for episode_label, c in enumerate(class_set):
            pool = [self._idx[p][c] for p in query_patients if c in self._idx[p]]
            pool = np.concatenate(pool)
            take = min(self.cfg.query, len(pool))  # "(if available)" fallback
            pick = rng.choice(len(pool), size=take, replace=False)
            qry_rows.append(pool[np.sort(pick)])
            qry_labels.extend([episode_label] * take)

        sup_rows = np.concatenate(sup_rows)
        qry_rows = np.concatenate(qry_rows)
        return Episode(
            support_vectors=self._vectors[sup_rows],
            support_labels=np.array(sup_labels, dtype=np.int64),
            query_vectors=self._vectors[qry_rows],
            query_labels=np.array(qry_labels, dtype=np.int64),
            support_patients=frozenset(
                self.dataset.records[i].patient_id for i in sup_rows
            ),
            query_patients=frozenset(
                self.dataset.records[i].patient_id for i in qry_rows
            ),
            way=self.cfg.way,
            classes=class_set,
        )


def sample_episode(
    dataset: Dataset,
    cfg: EpisodeConfig,
    rng: np.random.Generator,
    query_pool: Iterable[str] | None = None,
    support_pool: Iterable[str] | None = None,
) -> Episode:
    """One-off episode sample; loops should build an EpisodeSampler instead."""
    return EpisodeSampler(dataset, cfg, query_pool, support_pool).sample(rng)


def episode_rng(seed: int, phase: int, fold: int | None, index: int) -> np.random.Generator:
    """Independent per-episode stream: hash of (seed, phase, fold, index)."""
    fold_key = 0 if fold is None else fold + 1
    return np.random.default_rng(np.random.SeedSequence([seed, phase, fold_key, index]))


@dataclass
class HeadParams:
    """Everything a head needs at inference time."""

    adapter: AdapterParams
    relation: RelationParams | None = None


def _config_dict(tcfg: TrainConfig, ecfg: EpisodeConfig) -> dict:
    return {"episode": asdict(ecfg), "train": asdict(tcfg)}


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


def train(
    head: str,
    dataset: Dataset,
    tcfg: TrainConfig,
    ecfg: EpisodeConfig,
    fold: int | None = None,
) -> tuple[HeadParams, list[float]]:
    """Episodic Adam training of the adapter (and relation module).

    Deterministic for a fixed (head, dataset, configs, fold): episode i uses
    the stream (seed, train-phase, fold, i). Returns final parameters and the
    per-episode loss history.
    """
    if head not in HEAD_IDS:
        raise UnknownHead(f"head must be one of {HEAD_IDS}, got {head!r}")
    sampler = EpisodeSampler(dataset, ecfg)
    d = tcfg.adapter_dim if tcfg.adapter_dim is not None else dataset.dim
    adapter = AdapterParams.identity(dataset.dim, d, with_bias=tcfg.adapter_bias)
    relation = None
    if head == "relationnet":
        init_rng = np.random.default_rng(
            np.random.SeedSequence([tcfg.seed, _PHASE_TRAIN, 0 if fold is None else fold + 1])
        )
        relation = RelationParams.init(d, tcfg.relation_hidden, init_rng)

    params = pack_params(adapter, relation)
    state = AdamState(
        lr=tcfg.learning_rate, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.adam_eps
    )
    history: list[float] = []
    for i in range(tcfg.train_episodes):
        rng = episode_rng(tcfg.seed, _PHASE_TRAIN, fold, i)
        episode = sampler.sample(rng)
        adapter, relation = unpack_params(params, head == "relationnet")
        loss, grads = episode_loss(head, episode, adapter, relation)
        params = adam_step(params, grads, state)
        history.append(loss)
    adapter, relation = unpack_params(params, head == "relationnet")
    return HeadParams(adapter=adapter, relation=relation), history


@dataclass(frozen=True)
class RunReport:
    """Per-episode accuracies plus their aggregation and full provenance."""

    head: str
    config: dict
    seeds: dict
    fold_id: int | None
    episode_accuracies: tuple[float, ...]
    median: float
    q1: float
    q3: float
    train_dataset: str
    eval_dataset: str

    @classmethod
    def from_accuracies(
        cls,
        head: str,
        accuracies: Iterable[float],
        config: dict,
        seeds: dict,
        fold_id: int | None,
        train_dataset: str,
        eval_dataset: str,
    ) -> "RunReport":
        accs = tuple(float(a) for a in accuracies)
        arr = np.array(accs)
        return cls(
            head=head,
            config=config,
            seeds=seeds,
            fold_id=fold_id,
            episode_accuracies=accs,
            median=float(np.median(arr)),
            q1=float(np.percentile(arr, 25)),
            q3=float(np.percentile(arr, 75)),
            train_dataset=train_dataset,
            eval_dataset=eval_dataset,
        )

    def consistent(self, tol: float = 1e-12) -> bool:
        arr = np.array(self.episode_accuracies)
        return (
            abs(self.median - float(np.median(arr))) <= tol
            and abs(self.q1 - float(np.percentile(arr, 25))) <= tol
            and abs(self.q3 - float(np.percentile(arr, 75))) <= tol
        )

    def to_dict(self) -> dict:
        return {
            "head": self.head,
            "config": self.config,
            "seeds": self.seeds,
            "fold_id": self.fold_id,
            "episode_accuracies": list(self.episode_accuracies),
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "train_dataset": self.train_dataset,
            "eval_dataset": self.eval_dataset,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        required = {
            "head", "config", "seeds", "fold_id", "episode_accuracies",
            "median", "q1", "q3", "train_dataset", "eval_dataset",
        }
        if not isinstance(data, dict) or not required.issubset(data):
            missing = required - set(data) if isinstance(data, dict) else required
            raise ReportFormatError(f"missing report fields: {sorted(missing)}")
        accs = data["episode_accuracies"]
        if not isinstance(accs, list) or not all(
            isinstance(a, (int, float)) and 0.0 <= a <= 1.0 for a in accs
        ):
            raise ReportFormatError("episode_accuracies must be floats in [0, 1]")
        return cls(
            head=data["head"],
            config=data["config"],
            seeds=data["seeds"],
            fold_id=data["fold_id"],
            episode_accuracies=tuple(float(a) for a in accs),
            median=float(data["median"]),
            q1=float(data["q1"]),
            q3=float(data["q3"]),
            train_dataset=data["train_dataset"],
            eval_dataset=data["eval_dataset"],
        )

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ReportFormatError(f"not valid JSON: {exc}") from None
        return cls.from_dict(data)


def evaluate(
    head: str,
    params: HeadParams,
    dataset: Dataset,
    tcfg: TrainConfig,
    ecfg: EpisodeConfig,
    fold_id: int | None = None,
    query_pool: Iterable[str] | None = None,
    support_pool: Iterable[str] | None = None,
    train_dataset: str | None = None,
    extra_config: dict | None = None,
    workers: int = 1,
) -> RunReport:
    """Frozen-parameter evaluation over tcfg.eval_episodes sampled episodes.

    Per-episode accuracy is the fraction of correctly predicted query
    samples. Episodes are pure given the per-episode stream, so `workers`
    may be > 1 without affecting results.
    """
    sampler = EpisodeSampler(dataset, ecfg, query_pool, support_pool)

    def run_one(i: int) -> float:
        rng = episode_rng(tcfg.seed, _PHASE_EVAL, fold_id, i)
        ep = sampler.sample(rng)
        scores = episode_scores(head, ep, params.adapter, params.relation)
        return float(np.mean(scores.predictions == ep.query_labels))

    indices = range(tcfg.eval_episodes)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accuracies = list(pool.map(run_one, indices))
    else:
        accuracies = [run_one(i) for i in indices]

    config = _config_dict(tcfg, ecfg)
    if extra_config:
        config.update(extra_config)
    config["hash"] = config_hash(config)
    seeds = {"base": tcfg.seed, "train_phase": _PHASE_TRAIN, "eval_phase": _PHASE_EVAL,
             "fold": fold_id}
    return RunReport.from_accuracies(
        head=head,
        accuracies=accuracies,
        config=config,
        seeds=seeds,
        fold_id=fold_id,
        train_dataset=dataset.name if train_dataset is None else train_dataset,
        eval_dataset=dataset.name,
    )


def cross_validate(
    head: str,
    dataset: Dataset,
    k: int,
    tcfg: TrainConfig,
    ecfg: EpisodeConfig,
    workers: int = 1,
    stratify: bool = False,
) -> list[RunReport]:
    """Patient-level k-fold protocol.

    Per fold: the adapter trains on episodes drawn only from the non-fold
    patients, then evaluation episodes take query patients from the held-out
    fold and support patients from the training pool, so the train/test
    patient boundary is never crossed. `stratify` balances folds by whether
    a patient carries any malignant frames (off by default).
    """
    strat = None
    if stratify:
        strat = {p: 0 for p in dataset.patients}
        for rec in dataset.records:
            if rec.label > 0:
                strat[rec.patient_id] = 1
    folds = make_folds(dataset.patients, k, tcfg.seed, stratify_labels=strat)
    reports = []
    for f in range(k):
        held = folds.fold(f)
        rest = tuple(p for p in dataset.patients if p not in set(held))
        train_ds = filter_by_patients(dataset, rest)
        params, _ = train(head, train_ds, tcfg, ecfg, fold=f)
        reports.append(
            evaluate(
                head,
                params,
                dataset,
                tcfg,
                ecfg,
                fold_id=f,
                query_pool=held,
                support_pool=rest,
                extra_config={"fold_patients": list(held), "cv_k": k},
                workers=workers,
            )
        )
    return reports


def transfer(
    head: str,
    train_data: Dataset,
    eval_data: Dataset,
    tcfg: TrainConfig,
    ecfg: EpisodeConfig,
    workers: int = 1,
) -> RunReport:
    """Cross-domain protocol: adapt on one dataset, evaluate on another.

    Evaluation episodes are sampled inside the evaluation dataset with the
    usual patient disjointness, so no patient supports its own queries.
    """
    params, _ = train(head, train_data, tcfg, ecfg)
    return evaluate(
        head,
        params,
        eval_data,
        tcfg,
        ecfg,
        train_dataset=train_data.name,
        extra_config={"transfer": {"train": train_data.name, "eval": eval_data.name}},
        workers=workers,
    )


def ablate_patients(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Seeded uniform choice of n patients, keeping all their frames."""
    patients = dataset.patients
    if n > len(patients):
        raise NotEnoughPatients(f"asked for {n} of {len(patients)} patients")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(patients), size=n, replace=False)
    return filter_by_patients(dataset, [patients[i] for i in chosen])
