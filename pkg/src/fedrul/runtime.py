"""Federated training with decentralized validation.

One epoch, as driven by :func:`run_epoch`:

1. every client trains the current global model for one local epoch;
2. clients upload their local models;
3. the server scores the local models (full or random policy) and aggregates;
4. the new global model is broadcast;
5. every client computes its validation sum of squared errors on it;
6. clients report that scalar;
7. the server sums the scalars and keeps the best global model seen so far.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from fedrul import aggregation as agg
from fedrul.aggregation import AggregationMethod, EvaluationScore
from fedrul.dataprep import ClientDataset, FlightSeries, window_extract
from fedrul.nn import AdamState, Batch, NetworkSpec, ParameterVector, adam_step, backward, forward, init_parameters, param_layout, rmse, sse_loss
from fedrul.transport import (
    SERVER_PEER,
    DirectEndpoint,
    Endpoint,
    InProcHub,
    TcpClientEndpoint,
    TcpServerEndpoint,
    TransportError,
    parse_address,
)
from fedrul.wire import SERVER_ID, Message, MessageType

log = logging.getLogger(__name__)


class EpochAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.001
    reset_optimizer: bool = False  # True: fresh Adam moments every round
    eval_batch_size: int = 2048


@dataclass(frozen=True)
class FLConfig:
    method: AggregationMethod = AggregationMethod.FEDAVG
    epochs: int = 100
    train: TrainConfig = field(default_factory=TrainConfig)
    train_seed: int = 0
    assign_seed: int = 0
    transport: str = "inproc"  # inproc | tcp
    threaded: bool = True  # False: single-threaded inproc, for debugging
    listen: str = "127.0.0.1:0"
    external_clients: bool = False  # tcp only: wait for clients started elsewhere
    timeout: float = 600.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", AggregationMethod(self.method))
        if self.transport not in ("inproc", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")


# -- client side -----------------------------------------------------------


def _predict(spec: NetworkSpec, params: ParameterVector, x: np.ndarray, chunk: int = 2048) -> np.ndarray:
    if len(x) == 0:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate([forward(spec, params, x[i:i + chunk]) for i in range(0, len(x), chunk)])


def evaluate_model_on_validation(spec: NetworkSpec, params: ParameterVector, dataset: ClientDataset, metric: str = "rmse") -> float:
    """RMSE (evaluation scores) or SSE (global validation sum) over the client's validation windows."""
    val = dataset.validation_windows
    if len(val) == 0:
        raise ValueError(f"client {dataset.client_id} has no validation windows")
    preds = _predict(spec, params, val.x)
    if metric == "rmse":
        return rmse(preds, val.y)
    if metric == "sse":
        return sse_loss(preds, val.y)
    raise ValueError(f"unknown metric {metric!r}")


def predict_flight_rul(spec: NetworkSpec, params: ParameterVector, flight: FlightSeries, stride: int = 10) -> float:
    """Median of the per-window predictions over one normalized flight."""
    windows = window_extract(flight, spec.input_window, stride)
    if not windows:
        raise ValueError(f"flight {flight.engine_id}/{flight.flight_index} is shorter than one window")
    preds = _predict(spec, params, np.stack([w.values for w in windows]).astype(np.float32))
    return agg.median(preds)


def train_local_epoch(
    spec: NetworkSpec,
    params: ParameterVector,
    optimizer: AdamState,
    dataset: ClientDataset,
    rng: np.random.Generator,
    batch_size: int = 128,
) -> tuple[ParameterVector, AdamState]:
    """One pass over the shuffled training windows with Adam."""
    train = dataset.training_windows
    order = rng.permutation(len(train))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        dropout_seed = int(rng.integers(2**63))
        _, grad = backward(spec, params, Batch(train.x[idx], train.y[idx]), training=True, rng_seed=dropout_seed)
        params, optimizer = adam_step(optimizer, params, grad)
    return params, optimizer


class ClientWorker:
    """Holds one client's private data and answers the server's requests."""

    def __init__(
        self,
        dataset: ClientDataset,
        spec: NetworkSpec,
        train: TrainConfig = TrainConfig(),
        seed: int = 0,
        stream_key: int | None = None,
    ):
        """``stream_key`` picks the shuffle/dropout stream; it defaults to the client id."""
        self.client_id = dataset.client_id
        self.dataset = dataset
        self.spec = spec
        self.train = train
        self.layout = param_layout(spec)
        key = self.client_id if stream_key is None else stream_key
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, key]))
        self.optimizer = self._fresh_optimizer()
        self.local_params: ParameterVector | None = None
        self.global_params: ParameterVector | None = None
        self._trained_epoch = 0

    def _fresh_optimizer(self) -> AdamState:
        return AdamState.zeros(self.layout[-1].stop, learning_rate=self.train.learning_rate)

    def register_message(self) -> Message:
        return Message(MessageType.REGISTER, 0, self.client_id, float(self.dataset.n_train))

    def _params(self, msg: Message) -> ParameterVector:
        return ParameterVector(msg.payload, self.layout)

    def handle(self, msg: Message) -> Message | None:
        t = msg.type
        if t is MessageType.GLOBAL_MODEL and msg.epoch > self._trained_epoch:
            # step 1: train the received global model for one local epoch
            if self.train.reset_optimizer:
                self.optimizer = self._fresh_optimizer()
            self.local_params, self.optimizer = train_local_epoch(
                self.spec, self._params(msg), self.optimizer, self.dataset, self.rng, self.train.batch_size
            )
            self._trained_epoch = msg.epoch
            return Message(MessageType.LOCAL_MODEL, msg.epoch, self.client_id, self.local_params.values)
        if t is MessageType.GLOBAL_MODEL:
            # step 5: validate the aggregated model
            self.global_params = self._params(msg)
            loss = evaluate_model_on_validation(self.spec, self.global_params, self.dataset, "sse")
            return Message(MessageType.VAL_SUM_LOSS, msg.epoch, self.client_id, loss)
        if t is MessageType.EVAL_ASSIGNMENT:
            loss = evaluate_model_on_validation(self.spec, self._params(msg), self.dataset, "rmse")
            return Message(MessageType.EVAL_LOSS, msg.epoch, self.client_id, loss)
        if t in (MessageType.EPOCH_END, MessageType.SHUTDOWN):
            return None
        raise ValueError(f"client {self.client_id}: unexpected {t.name}")

    def serve(self, endpoint: Endpoint, timeout: float | None = None) -> None:
        """Register, then answer requests until SHUTDOWN. Any failure closes the channel."""
        try:
            endpoint.send(SERVER_PEER, self.register_message())
            while True:
                msg = endpoint.recv(SERVER_PEER, timeout)
                if msg.type is MessageType.SHUTDOWN:
                    break
                reply = self.handle(msg)
                if reply is not None:
                    endpoint.send(SERVER_PEER, reply)
        except Exception:
            log.exception("client %s failed", self.client_id)
            raise
        finally:
            endpoint.close()


# -- server side -----------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    epoch: int
    params: ParameterVector
    global_val_loss: float


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    global_val_loss: float
    per_client_val_sum: dict[int, float]
    eval_scores: list[EvaluationScore] | None = None
    weights: dict[int, float] | None = None  # softmax weights or FedAvg fractions
    selected: int | None = None  # best-model methods
    n_eval_losses: int = 0


@dataclass(frozen=True)
class ServerState:
    global_params: ParameterVector
    method: AggregationMethod
    client_registry: tuple[tuple[int, int], ...]  # (client id, n_train), fixed order
    epoch: int = 0
    best_checkpoint: Checkpoint | None = None
    history: tuple[EpochReport, ...] = ()

    @property
    def client_ids(self) -> list[int]:
        return [c for c, _ in self.client_registry]


def _expect(endpoint: Endpoint, peer: int, mtype: MessageType, epoch: int, timeout) -> Message:
    msg = endpoint.recv(peer, timeout)
    if msg.type is not mtype or msg.epoch != epoch:
        raise EpochAborted(f"epoch {epoch}: expected {mtype.name} from client {peer}, got {msg.type.name} (epoch {msg.epoch})")
    return msg


def assignment_seed(base: int, epoch: int) -> int:
    return int(np.random.SeedSequence([base, epoch]).generate_state(1)[0])


def run_epoch(state: ServerState, endpoint: Endpoint, assign_seed: int = 0, timeout: float | None = 600.0) -> tuple[ServerState, EpochReport]:
    try:
        return _run_epoch(state, endpoint, assign_seed, timeout)
    except (TransportError, ValueError) as exc:
        raise EpochAborted(f"epoch {state.epoch + 1} aborted: {exc}") from exc


def _run_epoch(state, endpoint, assign_seed, timeout):
    epoch = state.epoch + 1
    ids = state.client_ids
    layout = state.global_params.layout
    method = state.method

    # 1-2: local training
    for c in ids:
        endpoint.send(c, Message(MessageType.GLOBAL_MODEL, epoch, SERVER_ID, state.global_params.values))
    local = [ParameterVector(_expect(endpoint, c, MessageType.LOCAL_MODEL, epoch, timeout).payload, layout) for c in ids]

    # 3a: evaluation of the local models on other clients' validation sets
    scores = None
    n_eval = 0
    if method.policy == "full":
        for i in ids:
            for w in local:
                endpoint.send(i, Message(MessageType.EVAL_ASSIGNMENT, epoch, SERVER_ID, w.values))
        losses = np.array([[_expect(endpoint, i, MessageType.EVAL_LOSS, epoch, timeout).payload for _ in ids] for i in ids])
        n_eval = losses.size
        scores = agg.eval_full(losses, ids)
    elif method.policy == "random":
        assignment = agg.draw_assignment(ids, assignment_seed(assign_seed, epoch))
        for j, w in zip(ids, local):
            endpoint.send(assignment[j], Message(MessageType.EVAL_ASSIGNMENT, epoch, SERVER_ID, w.values))
        pair_loss = {j: _expect(endpoint, assignment[j], MessageType.EVAL_LOSS, epoch, timeout).payload for j in ids}
        n_eval = len(pair_loss)
        scores = agg.eval_random(assignment, pair_loss)

    # 3b: aggregation
    weights = selected = None
    if method.rule == "fedavg":
        n_train = [n for _, n in state.client_registry]
        weights = dict(zip(ids, agg.fedavg_fractions(n_train).tolist()))
        new_global = agg.fedavg(list(zip(local, n_train)))
    elif method.rule == "softmax":
        weights = agg.softmax_weights(scores)
        new_global = agg.aggregate_softmax(local, weights)
    else:
        new_global, selected = agg.select_best(scores, local)

    # 4-6: broadcast and decentralized validation
    for c in ids:
        endpoint.send(c, Message(MessageType.GLOBAL_MODEL, epoch, SERVER_ID, new_global.values))
    per_client = {c: _expect(endpoint, c, MessageType.VAL_SUM_LOSS, epoch, timeout).payload for c in ids}

    # 7: total validation loss and checkpoint
    total = 0.0
    for c in ids:
        total += per_client[c]
    report = EpochReport(epoch, total, per_client, scores, weights, selected, n_eval)
    best = state.best_checkpoint
    if best is None or total < best.global_val_loss:
        best = Checkpoint(epoch, new_global, total)
    for c in ids:
        endpoint.send(c, Message(MessageType.EPOCH_END, epoch, SERVER_ID))
    new_state = replace(state, global_params=new_global, epoch=epoch, best_checkpoint=best, history=state.history + (report,))
    return new_state, report


# -- whole runs ------------------------------------------------------------


def _register(endpoint: Endpoint, hellos: dict[int, Message], ids: Sequence[int]) -> tuple[tuple[int, int], ...]:
    missing = [c for c in ids if c not in hellos]
    if missing:
        raise EpochAborted(f"clients never registered: {missing}")
    return tuple((c, int(hellos[c].payload)) for c in ids)


def run_training(
    datasets: Sequence[ClientDataset],
    spec: NetworkSpec,
    config: FLConfig = FLConfig(),
    on_epoch: Callable[[EpochReport], None] | None = None,
) -> tuple[ServerState, ParameterVector]:
    """Run ``config.epochs`` federated epochs; returns the final state and the best-checkpoint parameters."""
    ids = [d.client_id for d in datasets]
    if len(set(ids)) != len(ids):
        raise ValueError("client ids must be unique")
    if config.method is not AggregationMethod.FEDAVG and len(ids) < 2:
        raise ValueError(f"{config.method.value} needs at least 2 clients")
    workers = [ClientWorker(d, spec, config.train, config.train_seed) for d in datasets]
    threads: list[threading.Thread] = []
    errors: list[BaseException] = []

    def launch(worker: ClientWorker, make_endpoint: Callable[[], Endpoint]) -> None:
        def target():
            try:
                worker.serve(make_endpoint(), config.timeout)
            except BaseException as exc:  # surfaced through the server's transport error
                errors.append(exc)

        t = threading.Thread(target=target, name=f"client-{worker.client_id}", daemon=True)
        t.start()
        threads.append(t)

    if config.transport == "inproc" and not config.threaded:
        endpoint: Endpoint = DirectEndpoint({w.client_id: w.handle for w in workers})
        hellos = {w.client_id: w.register_message() for w in workers}
    elif config.transport == "inproc":
        hub = InProcHub(ids)
        endpoint = hub.server
        for w in workers:
            launch(w, lambda c=w.client_id: hub.clients[c])
        hellos = {}
        for c in ids:
            msg = endpoint.recv(c, config.timeout)
            hellos[msg.sender] = msg
    else:
        server = TcpServerEndpoint(parse_address(config.listen))
        endpoint = server
        log.info("listening on %s:%s", *server.address)
        if not config.external_clients:
            for w in workers:
                launch(w, lambda: TcpClientEndpoint(server.address, config.timeout))
        hellos = server.accept(len(ids), config.timeout)

    state = ServerState(init_parameters(spec), config.method, _register(endpoint, hellos, ids))
    try:
        for _ in range(config.epochs):
            state, report = run_epoch(state, endpoint, config.assign_seed, config.timeout)
            log.info("epoch %d: global validation SSE %.4f", report.epoch, report.global_val_loss)
            if on_epoch is not None:
                on_epoch(report)
        for c in ids:
            endpoint.send(c, Message(MessageType.SHUTDOWN, state.epoch, SERVER_ID))
    except EpochAborted:
        if errors:
            log.error("client failure: %r", errors[0])
        raise
    finally:
        endpoint.close()
        for t in threads:
            t.join(timeout=5.0)
    return state, state.best_checkpoint.params


def serve_client(dataset: ClientDataset, spec: NetworkSpec, connect: str, train: TrainConfig = TrainConfig(), seed: int = 0, timeout: float | None = 600.0) -> None:
    """Run one client process against a TCP server at ``connect``."""
    ClientWorker(dataset, spec, train, seed).serve(TcpClientEndpoint(parse_address(connect), timeout), timeout)
