"""Experiment orchestration: configs, full runs, and report files.

A run is a pure function of (config, seed): datasets, model inits, batch
order, and noise all derive from the one experiment seed, so rerunning
with the same config reproduces every reported number bit-for-bit.
Reports deliberately carry no wall-clock or host information.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    DEFAULT_PROFILES,
    HELD_OUT_PROFILE_NAME,
    TRAINING_PROFILE_NAMES,
    generate_client_dataset,
    split_dataset,
)
from .errors import FormulaMeasurementMismatch, InvalidConfig
from .federation import (
    FEDAVG_ALL,
    LOCAL_ONLY,
    ClientState,
    Strategy,
    TrainSettings,
    collect_published_kv,
    evaluate_clients,
    fine_tune,
    make_client,
    mean_dice,
    run_alignment,
    transmission_bytes,
)
from .losses import PblConfig
from .model import TAG_SHARED, ModelConfig
from .rng import derive_seed

ABLATION_ROWS = (
    ("none", False, False, False),
    ("dca", True, False, False),
    ("dca_adapter", True, True, False),
    ("full", True, True, True),
)

PAPER_SCALE = ModelConfig(image_size=128, base_channels=64, depth=3,
                          attention_heads=8)


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: str = "fedoap"
    use_dca: bool = True
    use_adapter: bool = True
    use_pbl: bool = True
    clients: int = 3
    rounds: int = 5
    local_epochs: int = 1
    fine_tune_epochs: int = 2
    samples_per_client: int = 200
    image_size: int = 32
    base_channels: int = 8
    depth: int = 3
    attention_heads: int = 4
    anchor_size: int = 4
    batch_size: int = 16
    base_lr: float = 5e-3
    min_lr: float = 5e-5
    weight_decay: float = 1e-5
    tau: float = 0.75
    lam: float = 0.1
    noise_variance: float = 0.1
    seeds: tuple[int, ...] = (42,)
    profiles: tuple[str, ...] = TRAINING_PROFILE_NAMES
    held_out_profile: str = HELD_OUT_PROFILE_NAME

    def validate(self) -> None:
        if self.clients < 1:
            raise InvalidConfig(f"clients must be >= 1, got {self.clients}")
        if min(self.rounds, self.local_epochs, self.fine_tune_epochs) < 0:
            raise InvalidConfig("rounds and epoch counts must be >= 0")
        if not self.seeds:
            raise InvalidConfig("at least one seed is required")
        if not self.profiles:
            raise InvalidConfig("at least one client profile is required")
        for name in (*self.profiles, self.held_out_profile):
            if name not in DEFAULT_PROFILES:
                raise InvalidConfig(f"unknown profile {name!r}")
        if self.held_out_profile in self.profiles:
            raise InvalidConfig(
                f"held-out profile {self.held_out_profile!r} is a training profile")
        self.base_model_config().validate()
        self.pbl_config().validate()
        self.strategy_obj()  # validates the tag
        # a fully-populated settings object checks lr and batch bounds
        self.train_settings(total_steps=1).validate()

    def strategy_obj(self) -> Strategy:
        return Strategy(tag=self.strategy, use_dca=self.use_dca,
                        use_adapter=self.use_adapter, use_pbl=self.use_pbl)

    def base_model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size,
                           base_channels=self.base_channels,
                           depth=self.depth,
                           attention_heads=self.attention_heads)

    def model_config(self) -> ModelConfig:
        return self.strategy_obj().model_config(self.base_model_config())

    def pbl_config(self) -> PblConfig:
        return PblConfig(tau=self.tau, lam=self.lam,
                         noise_variance=self.noise_variance)

    def train_settings(self, total_steps: int) -> TrainSettings:
        return TrainSettings(model=self.model_config(),
                             total_steps=total_steps,
                             base_lr=self.base_lr, min_lr=self.min_lr,
                             batch_size=self.batch_size,
                             weight_decay=self.weight_decay)

    def split_sizes(self) -> tuple[int, int, int]:
        n = self.samples_per_client
        n_test = round(0.10 * n)
        n_val = round(0.10 * (n - n_test))
        return n - n_test - n_val, n_val, n_test

    def planned_total_steps(self) -> int:
        n_train = self.split_sizes()[0]
        batches = math.ceil(n_train / self.batch_size)
        epochs = self.rounds * self.local_epochs + self.fine_tune_epochs
        return max(1, epochs * batches)

    def to_mapping(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in ("seeds", "profiles"):
                value = tuple(value)
            kwargs[key] = value
        config = cls(**kwargs)
        config.validate()
        return config


def build_federation(config: ExperimentConfig, seed: int) -> list[ClientState]:
    """K clients with seeded data, splits, inits, and anchor batches.

    Every per-client seed depends only on (seed, client index), never on
    the strategy, so baselines see identical data and initial weights.
    """
    config.validate()
    settings = config.train_settings(config.planned_total_steps())
    clients = []
    for cid in range(config.clients):
        profile = DEFAULT_PROFILES[config.profiles[cid % len(config.profiles)]]
        samples = generate_client_dataset(
            profile, config.samples_per_client, config.image_size,
            derive_seed(seed, "data", profile.name, cid))
        train, val, test = split_dataset(samples,
                                         seed=derive_seed(seed, "split", cid))
        clients.append(make_client(cid, train, val, test, settings,
                                   derive_seed(seed, "fed", cid),
                                   anchor_size=config.anchor_size))
    return clients


def _check_ledger(config: ExperimentConfig, strategy: Strategy, ledger) -> dict:
    """Closed form vs measured bytes; exact or FormulaMeasurementMismatch."""
    form = transmission_bytes(config.model_config(), strategy,
                              config.clients, config.anchor_size)
    rounds = config.rounds if strategy.communicates else 0
    expect_up = rounds * config.clients * form["uplink_bytes"]
    expect_down = rounds * config.clients * form["downlink_bytes"]
    measured_up = ledger.total_bytes("uplink")
    measured_down = ledger.total_bytes("downlink")
    if (measured_up, measured_down) != (expect_up, expect_down):
        raise FormulaMeasurementMismatch(
            f"measured uplink/downlink {measured_up}/{measured_down} != "
            f"closed-form {expect_up}/{expect_down}")
    return {
        "uplink_bytes_per_client_round": form["uplink_bytes"],
        "downlink_bytes_per_client_round": form["downlink_bytes"],
        "total_uplink_bytes": measured_up,
        "total_downlink_bytes": measured_down,
        "total_bytes": measured_up + measured_down,
    }


def run_single(config: ExperimentConfig, seed: int) -> dict:
    """One full pipeline (alignment + fine-tuning + evaluation) for one seed."""
    strategy = config.strategy_obj()
    clients = build_federation(config, seed)
    clients, ledger = run_alignment(clients, config.rounds, strategy,
                                    local_epochs=config.local_epochs)
    transmission = _check_ledger(config, strategy, ledger)
    if strategy.tag != FEDAVG_ALL:
        # the fedavg-all baseline keeps its single global model as-is
        for client in clients:
            fine_tune(client, config.fine_tune_epochs, config.pbl_config(),
                      strategy)
    report = evaluate_clients(clients, "test")
    return {
        "seed": seed,
        "alignment_losses": {str(c.client_id): c.loss_history for c in clients},
        "fine_tune_val_dice": {str(c.client_id): c.val_history for c in clients},
        "test_dice": {
            "per_client": {str(cid): score
                           for cid, score in report.per_client.items()},
            "mean": report.mean,
        },
        "transmission": transmission,
    }


def _summarize(runs: list[dict]) -> dict:
    means = [r["test_dice"]["mean"] for r in runs]
    client_ids = sorted(runs[0]["test_dice"]["per_client"])
    per_client = {}
    for cid in client_ids:
        values = [r["test_dice"]["per_client"][cid] for r in runs]
        per_client[cid] = {"mean": float(np.mean(values)),
                           "std": float(np.std(values))}
    return {
        "mean_dice": {"mean": float(np.mean(means)), "std": float(np.std(means))},
        "per_client": per_client,
    }


def run_experiment(config: ExperimentConfig) -> dict:
    config.validate()
    runs = [run_single(config, seed) for seed in config.seeds]
    return {
        "command": "train",
        "config": config.to_mapping(),
        "runs": runs,
        "summary": _summarize(runs),
    }


def run_ablation(config: ExperimentConfig) -> dict:
    """The four-mechanism grid, same data and seeds in every row."""
    config.validate()
    rows = []
    for name, dca, adapter, pbl in ABLATION_ROWS:
        row_config = replace(config, strategy="fedoap", use_dca=dca,
                             use_adapter=adapter, use_pbl=pbl)
        runs = [run_single(row_config, seed) for seed in config.seeds]
        summary = _summarize(runs)
        rows.append({
            "row": name,
            "use_dca": dca, "use_adapter": adapter, "use_pbl": pbl,
            "per_client": summary["per_client"],
            "mean_dice": summary["mean_dice"],
        })
    return {"command": "ablate", "config": config.to_mapping(), "rows": rows}


def run_generalization_once(config: ExperimentConfig, seed: int) -> dict:
    """Align on the training profiles, then drop in an unseen-profile client.

    The newcomer starts from the final averaged shared parameters plus
    freshly initialized personal parameters, sees the last broadcast's
    tokens, and never contributes to any round message.
    """
    strategy = config.strategy_obj()
    if not strategy.communicates:
        raise InvalidConfig("generalization needs a parameter-sharing strategy")
    clients = build_federation(config, seed)
    clients, _ = run_alignment(clients, config.rounds, strategy,
                               local_epochs=config.local_epochs)

    new_id = config.clients
    profile = DEFAULT_PROFILES[config.held_out_profile]
    samples = generate_client_dataset(
        profile, config.samples_per_client, config.image_size,
        derive_seed(seed, "data", profile.name, new_id))
    train, val, test = split_dataset(samples,
                                     seed=derive_seed(seed, "split", new_id))
    batches = math.ceil(len(train) / config.batch_size)
    settings = config.train_settings(max(1, config.fine_tune_epochs * batches))
    newcomer = make_client(new_id, train, val, test, settings,
                           derive_seed(seed, "fed", new_id),
                           anchor_size=config.anchor_size)
    donor = clients[0]
    arrays = newcomer.params.arrays()
    shared = (newcomer.params.names() if strategy.averages_everything
              else newcomer.params.names_by_tag(TAG_SHARED))
    for name in shared:
        arrays[name][...] = donor.params[name]
    newcomer.foreign_kv_cache = collect_published_kv(clients)

    zero_shot = mean_dice(newcomer, newcomer.test)
    fine_tune(newcomer, config.fine_tune_epochs, config.pbl_config(), strategy)
    tuned = mean_dice(newcomer, newcomer.test)
    return {
        "seed": seed,
        "profile": profile.name,
        "zero_shot_dice": zero_shot,
        "fine_tuned_dice": tuned,
        "gain": tuned - zero_shot,
    }


def run_generalization(config: ExperimentConfig) -> dict:
    config.validate()
    runs = [run_generalization_once(config, seed) for seed in config.seeds]
    summary = {}
    for key in ("zero_shot_dice", "fine_tuned_dice", "gain"):
        values = [r[key] for r in runs]
        summary[key] = {"mean": float(np.mean(values)),
                        "std": float(np.std(values))}
    return {"command": "generalize", "config": config.to_mapping(),
            "runs": runs, "summary": summary}


def run_transmission(config: ExperimentConfig) -> dict:
    """Closed-form and measured per-round bytes for every strategy.

    Measured numbers come from a real zero-epoch alignment round (payload
    sizes do not depend on training).  Paper-scale rows are closed-form
    only.
    """
    config.validate()
    rows = []
    for tag in ("fedoap", FEDAVG_ALL, LOCAL_ONLY):
        strategy = Strategy(tag=tag, use_dca=config.use_dca,
                            use_adapter=config.use_adapter,
                            use_pbl=config.use_pbl)
        probe = replace(config, strategy=tag, rounds=1, local_epochs=0,
                        fine_tune_epochs=0)
        clients = build_federation(probe, config.seeds[0])
        _, ledger = run_alignment(clients, 1, strategy, local_epochs=0)
        form = transmission_bytes(probe.model_config(), strategy,
                                  probe.clients, probe.anchor_size)
        measured_up = ledger.total_bytes("uplink") // probe.clients
        measured_down = ledger.total_bytes("downlink") // probe.clients
        if (measured_up, measured_down) != (form["uplink_bytes"],
                                            form["downlink_bytes"]):
            raise FormulaMeasurementMismatch(
                f"{tag}: measured {measured_up}/{measured_down} != closed-form "
                f"{form['uplink_bytes']}/{form['downlink_bytes']}")
        rows.append({
            "scale": "desk", "strategy": tag,
            "uplink_bytes": form["uplink_bytes"],
            "downlink_bytes": form["downlink_bytes"],
            "measured_uplink_bytes": measured_up,
            "measured_downlink_bytes": measured_down,
            "round_megabytes": (form["uplink_bytes"] + form["downlink_bytes"]) / 1e6,
        })
    for tag in ("fedoap", FEDAVG_ALL):
        strategy = Strategy(tag=tag)
        form = transmission_bytes(PAPER_SCALE, strategy, config.clients,
                                  config.anchor_size)
        rows.append({
            "scale": "paper", "strategy": tag,
            "uplink_bytes": form["uplink_bytes"],
            "downlink_bytes": form["downlink_bytes"],
            "measured_uplink_bytes": None,
            "measured_downlink_bytes": None,
            "round_megabytes": (form["uplink_bytes"] + form["downlink_bytes"]) / 1e6,
        })
    return {"command": "transmission", "config": config.to_mapping(),
            "rows": rows}


# --- report files ---

def write_report(report: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())
    return path


def write_metrics_csv(report: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for run in report["runs"]:
        seed = run["seed"]
        for cid in sorted(run["alignment_losses"]):
            for epoch, value in enumerate(run["alignment_losses"][cid]):
                rows.append([seed, cid, "alignment", epoch, "train_loss",
                             repr(value)])
        for cid in sorted(run["fine_tune_val_dice"]):
            for epoch, value in enumerate(run["fine_tune_val_dice"][cid]):
                rows.append([seed, cid, "fine_tune", epoch, "val_dice",
                             repr(value)])
        for cid in sorted(run["test_dice"]["per_client"]):
            rows.append([seed, cid, "final", 0, "test_dice",
                         repr(run["test_dice"]["per_client"][cid])])
    return _write_csv(out_dir / "metrics.csv",
                      ["seed", "client_id", "phase", "step", "metric", "value"],
                      rows)


def write_ablation_csv(result: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    client_ids = sorted(result["rows"][0]["per_client"])
    header = ["row", "use_dca", "use_adapter", "use_pbl",
              *[f"client_{cid}" for cid in client_ids], "mean"]
    rows = []
    for row in result["rows"]:
        rows.append([row["row"], row["use_dca"], row["use_adapter"],
                     row["use_pbl"],
                     *[repr(row["per_client"][cid]["mean"]) for cid in client_ids],
                     repr(row["mean_dice"]["mean"])])
    return _write_csv(out_dir / "ablation.csv", header, rows)


def write_transmission_csv(result: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["scale", "strategy", "uplink_bytes", "downlink_bytes",
              "measured_uplink_bytes", "measured_downlink_bytes",
              "round_megabytes"]
    rows = []
    for row in result["rows"]:
        rows.append([row["scale"], row["strategy"], row["uplink_bytes"],
                     row["downlink_bytes"],
                     "" if row["measured_uplink_bytes"] is None
                     else row["measured_uplink_bytes"],
                     "" if row["measured_downlink_bytes"] is None
                     else row["measured_downlink_bytes"],
                     repr(row["round_megabytes"])])
    return _write_csv(out_dir / "transmission.csv", header, rows)
