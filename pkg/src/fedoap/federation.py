"""Two-phase personalized federated training over a simulated wire.

Phase one (alignment): T rounds in which every client trains locally on
the clean segmentation loss, uploads its shared parameters plus detached
key/value anchor tokens, and receives back the elementwise mean of the
shared parameters together with every client's tokens.  Personal
parameters (attention queries, spatial adapter) never leave the client.
Phase two (fine-tuning): each client trains alone on the composite
perturbed-boundary loss and keeps its best validation checkpoint.

Three strategies share this machinery: the full protocol ("fedoap"), a
baseline that averages every parameter and exchanges no tokens
("fedavg-all"), and isolated local training ("local-only").  All byte
counts in the ledger are measured by actually serializing messages, so
the accounting can be checked against closed forms exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .data import Sample, batch_arrays
from .errors import (
    EmptyMessageSet,
    EmptySplit,
    EmptyValidationSplit,
    InvalidConfig,
    NameSetMismatch,
    PartitionViolation,
    RoundMismatch,
)
from .losses import (
    PblConfig,
    binarize_logits,
    composite_pbl_loss,
    dice_score,
    segmentation_loss,
)
from .model import KVTokens, ModelConfig, ParameterStore, init_model, parameter_layout
from .optim import AdamWConfig, AdamWState, adamw_step, cosine_lr
from .rng import Rng, derive_seed
from .autodiff import Tape
from .wire import KIND_BROADCAST, KIND_ROUND, message_bytes, serialize_message

FEDOAP = "fedoap"
FEDAVG_ALL = "fedavg-all"
LOCAL_ONLY = "local-only"
STRATEGY_TAGS = (FEDOAP, FEDAVG_ALL, LOCAL_ONLY)

SERVER_ID = 0xFFFFFFFF


@dataclass(frozen=True)
class Strategy:
    """Protocol variant plus mechanism toggles.

    The toggles describe the fedoap ablation grid; fedavg-all ignores
    them (it always shares the full parameter set, exchanges no tokens,
    and fine-tunes without the perturbed loss).
    """

    tag: str = FEDOAP
    use_dca: bool = True
    use_adapter: bool = True
    use_pbl: bool = True

    def __post_init__(self):
        if self.tag not in STRATEGY_TAGS:
            raise InvalidConfig(f"unknown strategy tag {self.tag!r}")

    @property
    def averages_everything(self) -> bool:
        return self.tag == FEDAVG_ALL

    @property
    def communicates(self) -> bool:
        return self.tag in (FEDOAP, FEDAVG_ALL)

    @property
    def exchanges_kv(self) -> bool:
        return self.tag == FEDOAP and self.use_dca

    @property
    def pbl_enabled(self) -> bool:
        return self.use_pbl and self.tag != FEDAVG_ALL

    def model_config(self, base: ModelConfig) -> ModelConfig:
        """Architecture implied by the toggles (fedavg-all keeps the full one)."""
        if self.averages_everything:
            return base
        return ModelConfig(
            image_size=base.image_size, in_channels=base.in_channels,
            base_channels=base.base_channels, depth=base.depth,
            attention_heads=base.attention_heads,
            use_dca=self.use_dca, use_adapter=self.use_adapter)


@dataclass
class TrainSettings:
    """Per-client hyperparameters shared by both training phases."""

    model: ModelConfig
    total_steps: int
    base_lr: float = 5e-3
    min_lr: float = 5e-5
    batch_size: int = 16
    weight_decay: float = 1e-5

    def validate(self) -> None:
        self.model.validate()
        if self.total_steps < 1 or self.batch_size < 1:
            raise InvalidConfig("total_steps and batch_size must be >= 1")
        if not 0.0 < self.min_lr <= self.base_lr:
            raise InvalidConfig(f"need 0 < min_lr <= base_lr, got "
                                f"{self.min_lr} / {self.base_lr}")


@dataclass
class ClientState:
    client_id: int
    params: ParameterStore
    optimizer: AdamWState
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    anchor_batch: np.ndarray  # [A, 1, H, W]
    rng: Rng
    settings: TrainSettings
    foreign_kv_cache: list[KVTokens] = field(default_factory=list)
    next_round: int = 0
    loss_history: list[float] = field(default_factory=list)  # per alignment epoch
    val_history: list[float] = field(default_factory=list)   # fine-tune checkpoints

    def split(self, name: str) -> list[Sample]:
        if name not in ("train", "val", "test"):
            raise InvalidConfig(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class RoundMessage:
    client_id: int
    round_index: int
    shared_params: dict[str, np.ndarray]
    kv_tokens: KVTokens | None
    payload_bytes: int


@dataclass(frozen=True)
class Broadcast:
    round_index: int
    averaged_shared: dict[str, np.ndarray]
    all_kv: list[KVTokens]  # ascending client_id
    payload_bytes: int


@dataclass(frozen=True)
class LedgerEntry:
    round_index: int
    direction: str  # "uplink" | "downlink"
    client_id: int
    nbytes: int


@dataclass
class TransmissionLedger:
    """Exact per-message byte accounting, one entry per client per direction."""

    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, round_index: int, direction: str, client_id: int,
               nbytes: int) -> None:
        self.entries.append(LedgerEntry(round_index, direction, client_id, nbytes))

    def total_bytes(self, direction: str | None = None,
                    client_id: int | None = None,
                    round_index: int | None = None) -> int:
        return sum(e.nbytes for e in self.entries
                   if (direction is None or e.direction == direction)
                   and (client_id is None or e.client_id == client_id)
                   and (round_index is None or e.round_index == round_index))

    def client_totals(self) -> dict[int, int]:
        totals: dict[int, int] = {}
        for e in self.entries:
            totals[e.client_id] = totals.get(e.client_id, 0) + e.nbytes
        return dict(sorted(totals.items()))

    def rounds(self) -> list[int]:
        return sorted({e.round_index for e in self.entries})


def make_client(client_id: int, train: list[Sample], val: list[Sample],
                test: list[Sample], settings: TrainSettings, seed: int,
                anchor_size: int = 4) -> ClientState:
    """Fresh client: seeded model init, optimizer, and a fixed anchor batch.

    The anchor batch (the samples whose bottleneck tokens get published)
    is drawn once from the train split and never changes across rounds.
    """
    settings.validate()
    if not 1 <= anchor_size <= len(train):
        raise InvalidConfig(
            f"anchor_size {anchor_size} not in [1, {len(train)}] for "
            f"client {client_id}")
    params = init_model(settings.model, derive_seed(seed, "model", client_id))
    optimizer = AdamWState(params.shapes(),
                           AdamWConfig(weight_decay=settings.weight_decay))
    picks = list(range(len(train)))
    Rng(derive_seed(seed, "anchor", client_id)).shuffle(picks)
    anchor_batch = np.stack([train[i].image for i in picks[:anchor_size]])
    return ClientState(
        client_id=client_id, params=params, optimizer=optimizer,
        train=train, val=val, test=test, anchor_batch=anchor_batch,
        rng=Rng(derive_seed(seed, "client", client_id)), settings=settings)


def shared_param_names(params: ParameterStore, strategy: Strategy) -> list[str]:
    if strategy.averages_everything:
        return params.names()
    return params.names_by_tag(mdl.TAG_SHARED)


def _merge_broadcast(client: ClientState, broadcast: Broadcast,
                     strategy: Strategy) -> None:
    """Overwrite shared slots with the averaged values; refresh token cache."""
    if broadcast.round_index != client.next_round - 1:
        raise RoundMismatch(
            f"client {client.client_id} at round {client.next_round} received "
            f"a broadcast for round {broadcast.round_index}")
    expected = set(shared_param_names(client.params, strategy))
    got = set(broadcast.averaged_shared)
    if not strategy.averages_everything:
        personal = got & set(client.params.names_by_tag(*mdl.PERSONAL_TAGS))
        if personal:
            raise PartitionViolation(
                f"broadcast touches personal parameters: {sorted(personal)[:3]}")
    if got != expected:
        raise NameSetMismatch(
            f"broadcast has {len(got)} shared names, client expects {len(expected)}")
    arrays = client.params.arrays()
    for name, value in broadcast.averaged_shared.items():
        arrays[name][...] = value
    client.foreign_kv_cache = [kv for kv in broadcast.all_kv
                               if kv.client_id != client.client_id]


def _train_epoch(client: ClientState, strategy: Strategy,
                 pbl_cfg: PblConfig | None) -> list[float]:
    """One seeded-shuffle pass over the train split; returns batch losses."""
    settings = client.settings
    config = settings.model
    foreign = client.foreign_kv_cache if config.use_dca else []
    order = list(range(len(client.train)))
    client.rng.shuffle(order)
    losses = []
    for start in range(0, len(order), settings.batch_size):
        picked = [client.train[i] for i in order[start:start + settings.batch_size]]
        images, masks = batch_arrays(picked)
        tape = Tape()
        logits, leaves = mdl.forward_trainable(tape, client.params, images,
                                               foreign, config)
        if pbl_cfg is None:
            loss = segmentation_loss(logits, masks)
        else:
            loss, _ = composite_pbl_loss(logits, masks, pbl_cfg, client.rng)
        grad_values = tape.backward(loss)
        grads = {name: grad_values.wrt(leaf) for name, leaf in leaves.items()}
        lr = cosine_lr(min(client.optimizer.step, settings.total_steps),
                       settings.total_steps, settings.base_lr, settings.min_lr)
        adamw_step(client.params.arrays(), grads, client.optimizer, lr)
        losses.append(loss.item())
    return losses


def _measure(kind: int, round_index: int, sender: int,
             tensors: dict[str, np.ndarray],
             kv_sections: list[KVTokens]) -> int:
    return len(serialize_message(kind, round_index, sender, tensors, kv_sections))


def client_local_round(client: ClientState, broadcast: Broadcast | None,
                       epochs: int, strategy: Strategy
                       ) -> tuple[ClientState, RoundMessage]:
    """Merge the previous broadcast, train locally, publish shared state."""
    if broadcast is not None:
        _merge_broadcast(client, broadcast, strategy)
    round_index = client.next_round
    for _ in range(epochs):
        batch_losses = _train_epoch(client, strategy, pbl_cfg=None)
        client.loss_history.append(float(np.mean(batch_losses)))

    kv = None
    if strategy.exchanges_kv:
        kv = mdl.compute_local_kv(client.params, client.anchor_batch,
                                  client.settings.model,
                                  client_id=client.client_id,
                                  round_index=round_index)
    shared = {name: client.params[name].copy()
              for name in shared_param_names(client.params, strategy)}
    payload = _measure(KIND_ROUND, round_index, client.client_id, shared,
                       [kv] if kv is not None else [])
    client.next_round = round_index + 1
    message = RoundMessage(client_id=client.client_id, round_index=round_index,
                           shared_params=shared, kv_tokens=kv,
                           payload_bytes=payload)
    return client, message


def server_aggregate(messages: list[RoundMessage]) -> Broadcast:
    """Elementwise mean of shared tensors; tokens concatenated by client id."""
    if not messages:
        raise EmptyMessageSet("no round messages to aggregate")
    rounds = {m.round_index for m in messages}
    if len(rounds) > 1:
        raise RoundMismatch(f"messages span rounds {sorted(rounds)}")
    ids = [m.client_id for m in messages]
    if len(set(ids)) != len(ids):
        raise InvalidConfig(f"duplicate client ids in round messages: {sorted(ids)}")
    ordered = sorted(messages, key=lambda m: m.client_id)
    names = set(ordered[0].shared_params)
    for m in ordered[1:]:
        if set(m.shared_params) != names:
            raise NameSetMismatch(
                f"client {m.client_id} shares a different parameter name set")

    averaged = {}
    for name in sorted(names):
        total = np.zeros_like(ordered[0].shared_params[name])
        for m in ordered:
            total = total + m.shared_params[name]
        averaged[name] = total / float(len(ordered))
    all_kv = [m.kv_tokens for m in ordered if m.kv_tokens is not None]
    round_index = ordered[0].round_index
    payload = _measure(KIND_BROADCAST, round_index, SERVER_ID, averaged, all_kv)
    return Broadcast(round_index=round_index, averaged_shared=averaged,
                     all_kv=all_kv, payload_bytes=payload)


def run_alignment(clients: list[ClientState], rounds: int, strategy: Strategy,
                  local_epochs: int = 1
                  ) -> tuple[list[ClientState], TransmissionLedger]:
    """T communication rounds, then a final merge of the last broadcast."""
    if not clients:
        raise EmptyMessageSet("alignment needs at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise InvalidConfig(f"client ids must be unique, got {ids}")
    ledger = TransmissionLedger()
    broadcast: Broadcast | None = None
    for t in range(rounds):
        messages = []
        for client in clients:
            _, message = client_local_round(client, broadcast, local_epochs,
                                            strategy)
            messages.append(message)
        if not strategy.communicates:
            continue
        for message in messages:
            ledger.record(t, "uplink", message.client_id, message.payload_bytes)
        broadcast = server_aggregate(messages)
        for client in clients:
            ledger.record(t, "downlink", client.client_id, broadcast.payload_bytes)
    if broadcast is not None:
        # each client now holds the final averaged shared half next to its
        # own personal half
        for client in clients:
            _merge_broadcast(client, broadcast, strategy)
    return clients, ledger


def collect_published_kv(clients: list[ClientState]) -> list[KVTokens]:
    """Every client's last-published tokens, rebuilt from the peer caches.

    After alignment each client caches everyone else's tokens, so the
    union of the caches recovers the full last broadcast (empty at K=1).
    """
    seen: dict[int, KVTokens] = {}
    for client in clients:
        for kv in client.foreign_kv_cache:
            seen.setdefault(kv.client_id, kv)
    return [seen[cid] for cid in sorted(seen)]


def mean_dice(client: ClientState, samples: list[Sample]) -> float:
    """Mean per-sample Dice, one sample per forward pass so the score does
    not depend on evaluation batching (attention mixes samples in a batch)."""
    config = client.settings.model
    foreign = client.foreign_kv_cache if config.use_dca else []
    scores = []
    for sample in samples:
        logits = mdl.forward(client.params, sample.image[None], foreign, config)
        pred = binarize_logits(logits.values[0, 0])
        scores.append(dice_score(pred, sample.mask))
    return float(np.mean(scores))


def fine_tune(client: ClientState, epochs: int, cfg: PblConfig,
              strategy: Strategy) -> ClientState:
    """Local-only fine-tuning; keeps the best validation-Dice checkpoint.

    The starting parameters are a candidate too, and ties keep the
    earliest checkpoint, so zero epochs return them bit-exact.
    """
    if not client.val:
        raise EmptyValidationSplit(f"client {client.client_id} has no val split")
    pbl_cfg = cfg if strategy.pbl_enabled else None
    best_params = client.params.copy()
    best_dice = mean_dice(client, client.val)
    client.val_history.append(best_dice)
    for _ in range(epochs):
        _train_epoch(client, strategy, pbl_cfg=pbl_cfg)
        score = mean_dice(client, client.val)
        client.val_history.append(score)
        if score > best_dice:
            best_dice = score
            best_params = client.params.copy()
    client.params = best_params
    return client


@dataclass(frozen=True)
class EvaluationReport:
    per_client: dict[int, float]
    mean: float


def evaluate_clients(clients: list[ClientState],
                     split: str = "test") -> EvaluationReport:
    per_client = {}
    for client in clients:
        samples = client.split(split)
        if not samples:
            raise EmptySplit(f"client {client.client_id} split {split!r} is empty")
        per_client[client.client_id] = mean_dice(client, samples)
    mean = float(np.mean(list(per_client.values())))
    return EvaluationReport(per_client=per_client, mean=mean)


def transmission_bytes(config: ModelConfig, strategy: Strategy, clients: int,
                       anchor: int) -> dict[str, int]:
    """Closed-form per-round, per-client byte counts for one direction each.

    Matches the serialized sizes exactly: 4 bytes per f32 scalar plus the
    fixed header and per-section metadata.
    """
    config.validate()
    if clients < 1 or anchor < 0:
        raise InvalidConfig("need clients >= 1 and anchor >= 0")
    if not strategy.communicates:
        return {"uplink_bytes": 0, "downlink_bytes": 0}
    layout = parameter_layout(config)
    if strategy.averages_everything:
        shared_shapes = {e.name: e.shape for e in layout}
    else:
        shared_shapes = {e.name: e.shape for e in layout if e.tag == mdl.TAG_SHARED}
    kv_dims: list[tuple[int, int]] = []
    if strategy.exchanges_kv and anchor > 0:
        kv_dims = [(anchor * config.token_grid ** 2, config.bottleneck_dim)]
    uplink = message_bytes(shared_shapes, kv_dims)
    downlink = message_bytes(shared_shapes, kv_dims * clients)
    return {"uplink_bytes": uplink, "downlink_bytes": downlink}
