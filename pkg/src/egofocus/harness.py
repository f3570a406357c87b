"""Reproducible generate / train / eval / ablate runs driven by one JSON config."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .interactor import extract_status
from .metrics import MetricReport, aggregate, scenario_metrics, write_report_csv
from .model import ModelConfig, init_params, predict, training_step
from .nn import OptimState, ParamSet, params_from_json, params_to_json
from .scenarios import INTERACTIVE_KINDS, KINDS, Scenario, generate_scenario, load_scenarios, save_scenarios

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 0,
    "counts": {"free_flow": 10},
    "model": ModelConfig().to_dict(),
    "optimizer": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "lr_decay": "none"},
    "epochs": 10,
    "batch_size": 8,
    "out": "runs/default",
    "scenarios": None,
    "checkpoint": None,
    "ablation": {
        "train_count": 500,
        "eval_count": 200,
        "train_interactive_fraction": 0.8,
        "standard_interactive_fraction": 0.3,
        "adversarial_interactive_fraction": 0.8,
        "k_values": [3, 5, 7],
    },
}


class ConfigError(ValueError):
    """Invalid run configuration (maps to exit code 2)."""


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("counts",):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(overrides: dict | None = None) -> dict:
    """Apply overrides to the defaults and validate the result."""
    cfg = _merge(DEFAULT_CONFIG, overrides or {})
    validate_config(cfg)
    return cfg


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    file_cfg = {}
    if path:
        try:
            with open(path) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = _merge(DEFAULT_CONFIG, file_cfg)
    cfg = _merge(cfg, overrides or {})
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for kind, n in cfg["counts"].items():
        if kind not in KINDS:
            raise ConfigError(f"unknown maneuver kind {kind!r} in counts")
        if not isinstance(n, int) or n < 0:
            raise ConfigError(f"count for {kind} must be a non-negative integer")
    try:
        ModelConfig.from_dict(cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc
    opt = cfg["optimizer"]
    if opt["lr"] < 0 or not 0 <= opt["beta1"] < 1 or not 0 <= opt["beta2"] < 1 or opt["eps"] <= 0:
        raise ConfigError("invalid optimizer hyperparameters")
    if opt["lr_decay"] not in ("none", "cosine"):
        raise ConfigError("optimizer.lr_decay must be 'none' or 'cosine'")
    if not isinstance(cfg["epochs"], int) or cfg["epochs"] < 0:
        raise ConfigError("epochs must be a non-negative integer")
    if not isinstance(cfg["batch_size"], int) or cfg["batch_size"] < 1:
        raise ConfigError("batch_size must be a positive integer")
    ab = cfg["ablation"]
    for key in ("train_interactive_fraction", "standard_interactive_fraction",
                "adversarial_interactive_fraction"):
        if not 0.0 <= ab[key] <= 1.0:
            raise ConfigError(f"ablation.{key} must lie in [0, 1]")
    if not ab["k_values"] or any(not isinstance(k, int) or k < 1 for k in ab["k_values"]):
        raise ConfigError("ablation.k_values must be positive integers")


def config_line(cfg: dict) -> str:
    """The effective config as a one-line comment echoed into CSV outputs."""
    return f"# config: {json.dumps(cfg, sort_keys=True)}"


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


# data --------------------------------------------------------------------------

def generate_counts(counts: dict, seed: int) -> list[Scenario]:
    """Scenes for each kind in ``KINDS`` order; scenario seeds are derived from ``seed``."""
    out = []
    for kind in KINDS:
        for i in range(counts.get(kind, 0)):
            out.append(generate_scenario(kind, seed * 1_000_003 + i))
    return out


def split_kinds(n: int, interactive_fraction: float) -> list[str]:
    n_inter = int(round(interactive_fraction * n))
    kinds = [INTERACTIVE_KINDS[i % len(INTERACTIVE_KINDS)] for i in range(n_inter)]
    return kinds + ["free_flow"] * (n - n_inter)


def make_split(n: int, interactive_fraction: float, seed: int, stream: int) -> list[Scenario]:
    """A mixed split; ``stream`` keeps train/eval scenario seeds disjoint."""
    kinds = split_kinds(n, interactive_fraction)
    rng = np.random.Generator(np.random.PCG64([seed, stream]))
    order = rng.permutation(n)
    base = (seed * 10 + stream) * 100_000
    return [generate_scenario(kinds[j], base + j) for j in order]


def cmd_generate(cfg: dict, path: str | None = None) -> tuple[str, dict]:
    path = path or cfg["scenarios"] or os.path.join(cfg["out"], "scenarios.jsonl")
    scenarios = generate_counts(cfg["counts"], cfg["seed"])
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        save_scenarios(path, scenarios)
        with open(path + ".config.json", "w") as fh:
            json.dump(cfg, fh, sort_keys=True, indent=1)
    except OSError as exc:
        raise RuntimeError(f"cannot write scenarios to {path}: {exc}") from exc
    summary = {k: sum(s.kind == k for s in scenarios) for k in KINDS if cfg["counts"].get(k)}
    return path, summary


# training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamSet
    checkpoint_hash: str
    log_rows: list[dict]
    checkpoint_path: str | None = None


def _checkpoint_text(params: ParamSet, cfg: dict, epoch: int, optim: OptimState) -> str:
    doc = params_to_json(params, config=cfg)
    doc["epoch"] = epoch
    doc["optimizer"] = {
        "step": optim.step,
        "m": {k: [repr(float(x)) for x in v.ravel()] for k, v in optim.m.items()},
        "v": {k: [repr(float(x)) for x in v.ravel()] for k, v in optim.v.items()},
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def state_hash(doc: dict) -> str:
    """sha256 over a checkpoint's trained state (parameters, epoch, optimizer moments).

    The echoed run config is left out so that output paths and settings a
    variant ignores (``k`` for the baseline) do not change the hash.
    """
    payload = {k: v for k, v in doc.items() if k != "config"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def checkpoint_file_hash(path: str) -> str:
    with open(path) as fh:
        return state_hash(json.load(fh))


def _restore(path: str, cfg: dict) -> tuple[ParamSet, OptimState, int]:
    with open(path) as fh:
        doc = json.load(fh)
    params, _ = params_from_json(doc)
    optim = _fresh_optim(cfg)
    saved = doc.get("optimizer", {})
    optim.step = saved.get("step", 0)
    for key in ("m", "v"):
        getattr(optim, key).update({
            k: np.array([float(x) for x in vals]).reshape(params[k].shape)
            for k, vals in saved.get(key, {}).items()})
    return params, optim, int(doc.get("epoch", 0))


def train(cfg: dict, scenarios: Sequence[Scenario], out_dir: str | None = None,
          resume: str | None = None) -> TrainResult:
    """Epoch loop with per-epoch shuffling; writes checkpoint + log when ``out_dir`` is set."""
    mcfg = model_config(cfg)
    o = cfg["optimizer"]
    if resume:
        params, optim, start_epoch = _restore(resume, cfg)
    else:
        params = init_params(mcfg)
        optim = _fresh_optim(cfg)
        start_epoch = 0
    bs = cfg["batch_size"]
    steps_per_epoch = -(-len(scenarios) // bs)
    total_steps = steps_per_epoch * cfg["epochs"]
    rows = []
    text = _checkpoint_text(params, cfg, start_epoch, optim)
    ckpt_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint.json")
    for epoch in range(start_epoch, cfg["epochs"]):
        rng = np.random.Generator(np.random.PCG64([cfg["seed"], 7, epoch]))
        order = rng.permutation(len(scenarios))
        for b, start in enumerate(range(0, len(order), bs)):
            batch = [scenarios[i] for i in order[start:start + bs]]
            if o["lr_decay"] == "cosine":
                optim.lr = o["lr"] * 0.5 * (1.0 + math.cos(math.pi * optim.step / total_steps))
            params, rep = training_step(batch, params, optim, mcfg)
            rows.append({"epoch": epoch, "batch": b,
                         "scenario_ids": ";".join(s.id for s in batch),
                         "motion": rep.motion, "fla": rep.fla,
                         "motion_focal": rep.motion_focal, "plan": rep.plan,
                         "total": rep.total})
        text = _checkpoint_text(params, cfg, epoch + 1, optim)
        if ckpt_path:
            with open(ckpt_path, "w") as fh:
                fh.write(text)
        log.info("epoch %d done, last batch total %.4f", epoch, rows[-1]["total"] if rows else 0.0)
    if ckpt_path:
        with open(ckpt_path, "w") as fh:
            fh.write(text)
        _write_log(os.path.join(out_dir, "train_log.csv"), rows, cfg)
    return TrainResult(params, state_hash(json.loads(text)), rows, ckpt_path)


LOG_COLUMNS = ("epoch", "batch", "scenario_ids", "motion", "fla", "motion_focal", "plan", "total")


def _write_log(path: str, rows: list[dict], cfg: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(config_line(cfg) + "\n")
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_train(cfg: dict, scenario_path: str, resume: str | None = None) -> TrainResult:
    scenarios = load_scenarios(scenario_path)
    return train(cfg, scenarios, out_dir=cfg["out"], resume=resume)


# evaluation -------------------------------------------------------------------

def evaluate(params, cfg: dict, scenarios: Sequence[Scenario],
             dump: bool = False) -> tuple[MetricReport, list[dict]]:
    mcfg = model_config(cfg)
    per_scene, dumps = [], []
    for s in scenarios:
        out = predict(params, s, mcfg)
        ego, agents = extract_status(s)
        sizes = [(a.length, a.width) for a in agents]
        m = scenario_metrics(out.motion.data, s.agent_futures, out.plan.data, s.ego_plan, ego,
                             sizes, s.agent_future_headings)
        per_scene.append(m)
        if dump:
            sel = out.bundle.selection.as_records() if out.bundle is not None else []
            dumps.append({"scenario_id": s.id, "kind": s.kind, "interacting": s.interacting,
                          "selected": sel, "plan": out.plan.data.tolist(),
                          "gt_plan": s.ego_plan.tolist(), "motion": out.motion.data.tolist(),
                          "first_collision_step": m.first_hit})
    return aggregate(per_scene), dumps


EPA_NOTE = "EPA reported as hit rate under oracle perception (no detection penalty)"


def check_compatible(params: ParamSet, mcfg: ModelConfig) -> None:
    expected = init_params(ModelConfig(**{**mcfg.to_dict(), "seed": 0}))
    bad = sorted(k for k in set(expected) | set(params)
                 if k not in params or k not in expected or params[k].shape != expected[k].shape)
    if bad:
        raise ConfigError(f"checkpoint does not match model dims; mismatched fields: {bad}")


def checkpoint_config(path: str) -> dict:
    """The run config echoed into a checkpoint (empty if absent)."""
    try:
        with open(path) as fh:
            return json.load(fh).get("config") or {}
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc


def cmd_eval(cfg: dict, checkpoint: str, scenario_path: str, out_dir: str | None = None,
             dump: bool = True) -> MetricReport:
    with open(checkpoint) as fh:
        doc = json.load(fh)
    params, _ = params_from_json(doc)
    check_compatible(params, model_config(cfg))
    scenarios = load_scenarios(scenario_path)
    report, dumps = evaluate(params, cfg, scenarios, dump=dump)
    out_dir = out_dir or cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    write_report_csv(os.path.join(out_dir, "metrics.csv"), report,
                     EPA_NOTE + "\n" + config_line(cfg))
    if dump:
        with open(os.path.join(out_dir, "eval_dump.json"), "w") as fh:
            json.dump({"config": cfg, "scenarios": dumps}, fh, indent=1)
    return report


# ablation ---------------------------------------------------------------------

def ablation_variants(k_values: Sequence[int]) -> list[dict]:
    rows = [{"name": "baseline", "use_elai": False, "use_fla": False, "k": None}]
    rows += [{"name": f"elai_k{k}", "use_elai": True, "use_fla": False, "k": k} for k in k_values]
    rows += [{"name": f"elai_fla_k{k}", "use_elai": True, "use_fla": True, "k": k} for k in k_values]
    return rows


ABLATION_COLUMNS = ("variant", "use_elai", "use_fla", "k",
                    "std_l2_1s", "std_l2_2s", "std_l2_3s", "std_l2_avg",
                    "std_col_1s", "std_col_2s", "std_col_3s", "std_col_avg",
                    "adv_l2_1s", "adv_l2_2s", "adv_l2_3s", "adv_l2_avg",
                    "adv_col_1s", "adv_col_2s", "adv_col_3s", "adv_col_avg",
                    "adv_minade", "adv_minfde", "adv_mr", "checkpoint_hash")


def ablation_splits(cfg: dict) -> dict[str, list[Scenario]]:
    ab, seed = cfg["ablation"], cfg["seed"]
    return {
        "train": make_split(ab["train_count"], ab["train_interactive_fraction"], seed, 0),
        "std": make_split(ab["eval_count"], ab["standard_interactive_fraction"], seed, 1),
        "adv": make_split(ab["eval_count"], ab["adversarial_interactive_fraction"], seed, 2),
    }


def cmd_ablate(cfg: dict, out_dir: str | None = None, splits: dict | None = None) -> list[dict]:
    """Train and evaluate every variant on shared data; one table row per variant."""
    splits = splits or ablation_splits(cfg)
    rows = []
    default_k = cfg["model"]["k"]
    for v in ablation_variants(cfg["ablation"]["k_values"]):
        vcfg = copy.deepcopy(cfg)
        vcfg["model"].update(use_elai=v["use_elai"], use_fla=v["use_fla"],
                             k=v["k"] if v["k"] is not None else default_k)
        result = train(vcfg, splits["train"])
        std, _ = evaluate(result.params, vcfg, splits["std"])
        adv, _ = evaluate(result.params, vcfg, splits["adv"])
        row = {"variant": v["name"], "use_elai": v["use_elai"], "use_fla": v["use_fla"],
               "k": v["k"] if v["k"] is not None else ""}
        for prefix, rep in (("std", std), ("adv", adv)):
            for key in ("l2_1s", "l2_2s", "l2_3s", "l2_avg", "col_1s", "col_2s", "col_3s", "col_avg"):
                row[f"{prefix}_{key}"] = getattr(rep, key)
        row.update(adv_minade=adv.minade, adv_minfde=adv.minfde, adv_mr=adv.mr,
                   checkpoint_hash=result.checkpoint_hash)
        rows.append(row)
        log.info("%s: adv col_avg %.4f std col_avg %.4f", v["name"], adv.col_avg, std.col_avg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
            fh.write(config_line(cfg) + "\n")
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'variant':<14}{'k':>3}  {'std L2':>7} {'std col%':>8}  {'adv L2':>7} {'adv col%':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['variant']:<14}{str(r['k']):>3}  {r['std_l2_avg']:7.3f} "
                     f"{100 * r['std_col_avg']:8.2f}  {r['adv_l2_avg']:7.3f} {100 * r['adv_col_avg']:8.2f}")
    return "\n".join(lines)


def _fresh_optim(cfg: dict) -> OptimState:
    o = cfg["optimizer"]
    return OptimState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])


def initial_checkpoint_text(cfg: dict) -> str:
    """Checkpoint text of the untrained model, as ``train`` writes it at epoch 0."""
    return _checkpoint_text(init_params(model_config(cfg)), cfg, 0, _fresh_optim(cfg))
