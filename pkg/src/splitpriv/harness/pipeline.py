"""End-to-end protocol: train user model, cut, defend, measure MI, attack, score.

Each stage persists its artifact under the output directory tagged with the
config digest, so CLI subcommands can run stages one at a time and later
stages reuse earlier results.  :func:`run_pipeline` recomputes everything.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ..attack import build_head, build_joint, edge_digest, random_baseline, train_attack, train_best_baseline
from ..checkpoint import load_checkpoint, save_checkpoint
from ..data import DatasetManifest, generate_synthetic, load_idx, split_train_val
from ..defense import (DefenseConfig, apply_defense, build_defense, edge_activations, load_defense,
                       save_defense)
from ..errors import ConfigError, SplitPrivError
from ..metrics import PrivacyReport, build_report
from ..mi import estimate_mi, mi_reduction, prepare_pairs
from ..modelgraph import ModelGraph, TensorSpec, build_model
from ..splitter import CutPoint, edge_ratio, enumerate_cutpoints, split
from ..trainer import TrainConfig, evaluate, train
from .config import ExperimentConfig, TrainSection, write_config

log = logging.getLogger(__name__)

CUT_CONVENTION = "cut after the conv's full conv-(bn)-relu(-pool) group; noise added post-activation"


def stage_seed(master: int, stage: str, cut: str = "") -> int:
    """Per-stage seed from (master seed, stage name, cut label); order independent."""
    digest = hashlib.sha256(f"{master}|{stage}|{cut}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class Datasets:
    user_train: DatasetManifest
    user_val: DatasetManifest
    attacker_train: DatasetManifest
    attacker_val: DatasetManifest
    user_all: DatasetManifest


@dataclass
class RunRecord:
    config_digest: str
    reports: list[PrivacyReport] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    wall_times: dict[str, float] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0

    def to_dict(self) -> dict:
        return {"config_digest": self.config_digest, "reports": [r.to_dict() for r in self.reports],
                "failures": self.failures, "wall_times": self.wall_times, "artifacts": self.artifacts}

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(d["config_digest"], [PrivacyReport.from_dict(r) for r in d["reports"]], d["failures"],
                   d.get("wall_times", {}), d.get("artifacts", {}))


def _train_config(section: TrainSection, seed: int) -> TrainConfig:
    return TrainConfig(lr=section.lr, momentum=section.momentum, weight_decay=section.weight_decay,
                       epsilon=section.epsilon, epochs=section.epochs, batch_size=section.batch_size,
                       milestones=tuple(section.milestones), lr_factor=section.lr_factor, seed=seed)


class Experiment:
    """Lazily computed, disk-backed stages of one experiment."""

    def __init__(self, cfg: ExperimentConfig, reuse: bool = True):
        self.cfg = cfg
        self.reuse = reuse
        self.digest = cfg.digest()
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "stages").mkdir(exist_ok=True)
        write_config(cfg, self.out / "config.toml")
        self._defenses: dict = {}
        self._json_cache: dict = {}

    def seed(self, stage: str, cut: str = "") -> int:
        return stage_seed(self.cfg.seed, stage, cut)

    # -- persistence helpers -------------------------------------------------------

    def _stage_path(self, name: str) -> Path:
        return self.out / "stages" / f"{name}.json"

    def _cached_json(self, name: str, compute):
        if name in self._json_cache:
            return self._json_cache[name]
        path = self._stage_path(name)
        if self.reuse and path.exists():
            stored = json.loads(path.read_text())
            if stored.get("config_digest") == self.digest:
                self._json_cache[name] = stored["value"]
                return stored["value"]
        value = compute()
        path.write_text(json.dumps({"config_digest": self.digest, "value": value}, indent=1, sort_keys=True))
        self._json_cache[name] = value
        return value

    # -- data ------------------------------------------------------------------------

    @cached_property
    def data(self) -> Datasets:
        d = self.cfg.data
        if d.source == "synthetic":
            user, _ = generate_synthetic(self.seed("data.user"), d.n, d.user_classes, d.attribute,
                                         d.decodability, d.overlap)
            # the attacker task lives on a separately drawn dataset
            _, attacker = generate_synthetic(self.seed("data.attacker"), d.n, d.user_classes, d.attribute,
                                             d.decodability, d.overlap)
        else:
            if not (d.user_images and d.user_labels and d.attacker_images and d.attacker_labels):
                raise ConfigError("data.source = 'idx' needs user/attacker image and label paths")
            user = load_idx(d.user_images, d.user_labels, kind="user")
            attacker = load_idx(d.attacker_images, d.attacker_labels, kind="attacker")
        ut, uv = split_train_val(user, d.val_fraction, self.seed("split.user"))
        at, av = split_train_val(attacker, d.val_fraction, self.seed("split.attacker"))
        return Datasets(ut, uv, at, av, user)

    # -- user model --------------------------------------------------------------------

    @cached_property
    def user_model(self):
        path = self.out / "user_model.splk"
        graph, params = build_model(self.cfg.model.arch, self._input_spec(), self.data.user_train.task.num_classes,
                                    self.seed("init.user"))
        if self.reuse and path.exists():
            stored, meta = load_checkpoint(path, with_meta=True)
            if meta.get("config_digest") == self.digest:
                stored.validate(graph)
                return graph, stored, meta["train"]
        report = train(graph, params, self.data.user_train, _train_config(self.cfg.user, self.seed("train.user")),
                       val_set=self.data.user_val)
        summary = {"best_val_accuracy": report.best_val_accuracy, "final_train_loss": report.final_train_loss,
                   "epoch_log": report.epoch_log}
        save_checkpoint(params, path, {"config_digest": self.digest, "graph": graph.to_dict(), "train": summary})
        return graph, params, summary

    def _input_spec(self) -> TensorSpec:
        return TensorSpec(self.data.user_train.input_spec.shape, "float32")

    @cached_property
    def graph(self) -> ModelGraph:
        graph, _ = build_model(self.cfg.model.arch, self._input_spec(), self.data.user_train.task.num_classes)
        return graph

    def accuracy_u(self) -> float:
        graph, params, _ = self.user_model
        return self._cached_json("accuracy_u", lambda: evaluate(graph, params, self.data.user_val))

    # -- cuts ---------------------------------------------------------------------------

    def cuts(self, labels=None) -> list[CutPoint]:
        available = enumerate_cutpoints(self.graph)
        wanted = labels if labels is not None else self.cfg.cuts
        if wanted == "all":
            return available
        by_label = {c.label: c for c in available}
        unknown = [w for w in wanted if w not in by_label]
        if unknown:
            raise ConfigError(f"unknown cuts {unknown}; available {list(by_label)}")
        return [by_label[w] for w in wanted]

    def split(self, cut: CutPoint):
        graph, params, _ = self.user_model
        return split(graph, params, cut)

    def profile_cuts(self) -> list[dict]:
        return [{"cut": c.label, "index": c.index, **edge_ratio(self.graph, c)} for c in enumerate_cutpoints(self.graph)]

    # -- defense ----------------------------------------------------------------------------

    def defense(self, cut: CutPoint):
        if cut.label in self._defenses:
            return self._defenses[cut.label]
        path = self.out / f"defense_{cut.label}.splk"
        if self.reuse and path.exists():
            d, meta = load_defense(path, with_meta=True)
            if meta.get("config_digest") == self.digest:
                self._defenses[cut.label] = d
                return d
        s = self.split(cut)
        d = build_defense(s, self._defense_config(cut), calib_set=self.data.user_val, train_set=self.data.user_train)
        save_defense(d, path, {"config_digest": self.digest, "cut": cut.label})
        self._defenses[cut.label] = d
        return d

    def _defense_config(self, cut: CutPoint) -> DefenseConfig:
        d = self.cfg.defense
        return DefenseConfig(strategy=d.strategy, pa_target=d.pa_target, bank_size=d.bank_size, lam=d.lam,
                             seed=self.seed("defense", cut.label), epochs=d.epochs, lr=d.lr,
                             batch_size=d.batch_size, init_scale=d.init_scale, epsilon=self.cfg.user.epsilon)

    def accuracy_u_prime(self, cut: CutPoint) -> float:
        def compute():
            s = self.split(cut)
            d = self.defense(cut)
            return evaluate(s.cloud, s.cloud_params, (edge_activations(s, self.data.user_val.features()),
                                                      self.data.user_val.labels),
                            transform=lambda a, seed: apply_defense(d, a, seed), seed=self.seed("evaluate", cut.label))
        return self._cached_json(f"accuracy_u_prime_{cut.label}", compute)

    # -- mutual information -------------------------------------------------------------------

    def mi(self, cut: CutPoint) -> dict:
        def compute():
            m = self.cfg.mi
            s = self.split(cut)
            d = self.defense(cut)
            pool = self.data.user_all
            idx = np.sort(np.random.default_rng(self.seed("mi.sample")).permutation(pool.n)[: m.n_samples])
            x = pool.features()[idx]
            a = edge_activations(s, x)
            noised = apply_defense(d, a, self.seed("mi.noise", cut.label))
            proj_seed = self.seed("mi.projection", cut.label)
            est_seed = self.seed("mi.estimate", cut.label)
            kwargs = dict(estimator=m.estimator, k=m.k, bins=m.bins, mode=m.mode, seed=est_seed)
            orig = estimate_mi(prepare_pairs(x, a, m.dim, proj_seed), **kwargs)
            new = estimate_mi(prepare_pairs(x, noised, m.dim, proj_seed), **kwargs)
            return {"mi_original": orig.value_nats, "mi_original_raw": orig.raw_value,
                    "mi_noised": new.value_nats, "mi_noised_raw": new.raw_value,
                    "mi_reduction": mi_reduction(orig, new), "n_samples": orig.n_samples,
                    "estimator": orig.config}
        return self._cached_json(f"mi_{cut.label}", compute)

    # -- attack ------------------------------------------------------------------------------------

    def baseline(self) -> dict:
        def compute():
            d = self.data
            acc_a = train_best_baseline(self.cfg.model.arch, self._input_spec(), d.attacker_train, d.attacker_val,
                                        _train_config(self.cfg.baseline, self.seed("train.baseline")),
                                        d.attacker_train.task.num_classes, self.seed("init.baseline"))
            acc_r = random_baseline(d.attacker_val, self.cfg.attack.random_mode, self.seed("random"))
            return {"accuracy_a": acc_a, "accuracy_r": acc_r}
        return self._cached_json("baseline", compute)

    def attack(self, cut: CutPoint) -> dict:
        def compute():
            s = self.split(cut)
            head = build_head(self.cfg.attack.head, s, self.data.attacker_train.task.num_classes,
                              self.seed("init.head", cut.label), self.cfg.attack.init)
            joint = build_joint(s, self.defense(cut), head)
            before = edge_digest(joint)
            acc = train_attack(joint, self.data.attacker_train, self.data.attacker_val,
                               _train_config(self.cfg.attack_train, self.seed("train.attack", cut.label)))
            return {"accuracy_a_prime": acc, "edge_digest_before": before, "edge_digest_after": edge_digest(joint)}
        return self._cached_json(f"attack_{cut.label}", compute)

    # -- scoring -------------------------------------------------------------------------------------

    @staticmethod
    def _class_balance(ds) -> list[float]:
        return [float(c) / len(ds.labels) for c in ds.class_counts()]

    def report(self, cut: CutPoint) -> PrivacyReport:
        base = self.baseline()
        mi = self.mi(cut)
        d = self.defense(cut)
        att = self.attack(cut)
        ratios = edge_ratio(self.graph, cut)
        provenance = {
            "config_digest": self.digest,
            "master_seed": self.cfg.seed,
            "arch": self.cfg.model.arch,
            "cut_index": cut.index,
            "convention": CUT_CONVENTION,
            "defense": d.config.strategy,
            "sigma": d.bank.sigma,
            "mi_original": mi["mi_original"],
            "mi_noised": mi["mi_noised"],
            "mi_original_raw": mi["mi_original_raw"],
            "mi_noised_raw": mi["mi_noised_raw"],
            "mi_estimator": mi["estimator"],
            "edge_digest_before": att["edge_digest_before"],
            "edge_digest_after": att["edge_digest_after"],
            "head_arch": self.cfg.attack.head,
            "head_init": self.cfg.attack.init,
            "attack_train": asdict(self.cfg.attack_train),
            "baseline_train": asdict(self.cfg.baseline),
            "user_train": asdict(self.cfg.user),
            "weight_decay_scope": "all trainable parameters",
            "attacker_class_balance": self._class_balance(self.data.attacker_train),
        }
        return build_report(
            provenance, cut=cut.label, mi_reduction=mi["mi_reduction"], accuracy_u=self.accuracy_u(),
            accuracy_u_prime=self.accuracy_u_prime(cut), accuracy_a=base["accuracy_a"],
            accuracy_a_prime=att["accuracy_a_prime"], accuracy_r=base["accuracy_r"], **ratios)


def run_pipeline(cfg: ExperimentConfig, cuts=None, reuse: bool = False) -> RunRecord:
    """Run every stage for every selected cut; a failing cut is recorded, not fatal."""
    exp = Experiment(cfg, reuse=reuse)
    record = RunRecord(exp.digest)
    t0 = time.perf_counter()
    _ = exp.user_model
    exp.accuracy_u()
    record.wall_times["train_user"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    exp.baseline()
    record.wall_times["baseline"] = time.perf_counter() - t0
    for cut in exp.cuts(cuts):
        t0 = time.perf_counter()
        try:
            record.reports.append(exp.report(cut))
        except (SplitPrivError, ArithmeticError, ValueError, KeyError) as exc:
            log.warning("cut %s failed: %s", cut.label, exc)
            record.failures[cut.label] = f"{type(exc).__name__}: {exc}"
        record.wall_times[cut.label] = time.perf_counter() - t0
    record.artifacts["user_model"] = str(exp.out / "user_model.splk")
    for cut in exp.cuts(cuts):
        p = exp.out / f"defense_{cut.label}.splk"
        if p.exists():
            record.artifacts[f"defense_{cut.label}"] = str(p)
    return record
