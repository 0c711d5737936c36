"""
Model assembly, training loop, evaluation, model files and experiment reports.

The network is the fixed stack

    [Conv3x3 -> act -> MaxPool2x2 -> BatchNorm -> Dropout] x len(conv_filters)
    -> Flatten
    -> [Dense -> act -> BatchNorm -> Dropout] x len(hidden_widths)
    -> Dense(1) -> sigmoid

trained with binary cross-entropy and Adam. Per-epoch wall time covers the
training pass and the batch-norm calibration that follows it; the per-epoch
test evaluation is timed separately.
"""

import csv
import dataclasses
import math
import os
import platform
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.canny import CannyParams, canny_pipeline
from src.core import (
    CellScanError,
    ConfigurationError,
    CorpusIOError,
    ModelFormatError,
    ModelStateError,
    ParameterError,
    TrainingError,
    get_logger,
    handle_pipeline_errors,
    log_stage_metrics,
)
from src.imagedata import (
    INPUT_SIZE,
    CellLabel,
    DatasetIndex,
    load_image,
    make_batches,
    scan_dataset,
    stratified_split,
    stratified_subset,
    to_input_array,
)
from src.nn import (
    ActivationLayer,
    AdamState,
    BatchNormLayer,
    ConvLayer,
    DenseLayer,
    DropoutLayer,
    FlattenLayer,
    MaxPoolLayer,
    Model,
    adam_step,
    bce_loss,
    model_backward,
    model_forward,
    recalibrate_batchnorm,
)
from src.tensorcore import Rng, default_dtype, glorot_uniform, zeros

logger = get_logger(__name__, 'trainer')

MODEL_MAGIC = b"MCNN"
MODEL_FORMAT_VERSION = 1
DECISION_THRESHOLD = 0.5
MODE_CHANNELS = {"raw": 3, "canny": 1}

# Rng stream ids; imagedata owns 1-3
_INIT_STREAM = 0
_DROPOUT_STREAM = 4

Mode = Literal["raw", "canny"]
ActivationKind = Literal["sigmoid", "tanh", "relu"]


# --- Configuration ---------------------------------------------------------

class ModelConfig(BaseModel):
    """Architecture of the classifier; the defaults are the four-plus-four stack on 64x64 inputs."""
    model_config = ConfigDict(frozen=True)

    input_channels: Literal[1, 3] = 3
    image_size: int = Field(INPUT_SIZE, ge=1)
    conv_filters: List[int] = Field(default_factory=lambda: [32, 64, 128, 256], min_length=1)
    hidden_widths: List[int] = Field(default_factory=lambda: [512, 512, 512, 512], min_length=1)
    conv_dropout: float = Field(0.2, ge=0, lt=1)
    hidden_dropout: float = Field(0.5, ge=0, lt=1)
    activation: ActivationKind = "relu"
    output_activation: Literal["sigmoid"] = "sigmoid"
    bn_momentum: float = Field(0.9, ge=0, le=1)
    bn_epsilon: float = Field(1e-5, gt=0)
    seed: int = Field(42, ge=0)

    @field_validator("conv_filters", "hidden_widths")
    @classmethod
    def _positive_widths(cls, widths: List[int]) -> List[int]:
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        return widths

    @model_validator(mode="after")
    def _pooling_fits(self) -> "ModelConfig":
        factor = 2 ** len(self.conv_filters)
        if self.image_size % factor:
            raise ValueError(f"image_size {self.image_size} is not divisible by {factor} "
                             f"({len(self.conv_filters)} pooling stages)")
        return self

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "ModelConfig":
        if mode not in MODE_CHANNELS:
            raise ParameterError(f"Unknown mode '{mode}'. Must be one of {sorted(MODE_CHANNELS)}.")
        return cls(input_channels=MODE_CHANNELS[mode], **overrides)

    @property
    def flatten_width(self) -> int:
        side = self.image_size // 2 ** len(self.conv_filters)
        return self.conv_filters[-1] * side * side


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(5, ge=1)
    batch_size: int = Field(32, ge=2)
    learning_rate: float = Field(1e-3, ge=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    seed: int = Field(42, ge=0)
    threads: int = Field(1, ge=1)
    subset: Optional[int] = Field(None, ge=2)
    bn_calibration_images: int = Field(2048, ge=0)

    @field_validator("bn_calibration_images")
    @classmethod
    def _calibration_batches_fit(cls, images: int) -> int:
        if images == 1:
            raise ValueError("bn_calibration_images must be 0 (off) or at least 2")
        return images


class EpochMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    epoch: int = Field(ge=1)
    train_loss: float = Field(ge=0)
    train_accuracy: float = Field(ge=0, le=1)
    test_accuracy: float = Field(ge=0, le=1)
    wall_seconds: float = Field(ge=0)


class ReportTotals(BaseModel):
    model_config = ConfigDict(frozen=True)

    wall_seconds: float = Field(ge=0)
    final_test_accuracy: float = Field(ge=0, le=1)
    best_epoch: int = Field(ge=1)


class ExperimentReport(BaseModel):
    """One training run: per-epoch metrics, totals and the corpus it ran on."""
    model_config = ConfigDict(frozen=True)

    mode: Mode
    seed: int
    image_count: int = Field(ge=0)
    epochs: List[EpochMetrics] = Field(min_length=1)
    totals: ReportTotals
    corpus_bytes: int = Field(ge=0)
    system: str
    network: Optional[ModelConfig] = None
    training: Optional[TrainConfig] = None

    @model_validator(mode="after")
    def _totals_match_epochs(self) -> "ExperimentReport":
        wall = sum(m.wall_seconds for m in self.epochs)
        if not math.isclose(self.totals.wall_seconds, wall, rel_tol=1e-9, abs_tol=1e-9):
            raise ValueError(f"totals.wall_seconds {self.totals.wall_seconds} != sum of epochs {wall}")
        if self.totals.final_test_accuracy != self.epochs[-1].test_accuracy:
            raise ValueError("totals.final_test_accuracy must equal the last epoch's test accuracy")
        if self.totals.best_epoch not in {m.epoch for m in self.epochs}:
            raise ValueError(f"totals.best_epoch {self.totals.best_epoch} is not a recorded epoch")
        return self

    @classmethod
    def from_epochs(cls, mode: str, epochs: Sequence[EpochMetrics], corpus_bytes: int, **fields) -> "ExperimentReport":
        epochs = list(epochs)
        totals = ReportTotals(
            wall_seconds=sum(m.wall_seconds for m in epochs),
            final_test_accuracy=epochs[-1].test_accuracy,
            best_epoch=best_epoch(epochs),
        )
        return cls(mode=mode, epochs=epochs, totals=totals, corpus_bytes=corpus_bytes, **fields)


def best_epoch(epochs: Sequence[EpochMetrics]) -> int:
    """Epoch with the highest test accuracy; the earliest one wins ties."""
    if not epochs:
        raise ParameterError("No epochs recorded")
    return max(epochs, key=lambda m: (m.test_accuracy, -m.epoch)).epoch


# --- Model assembly --------------------------------------------------------

def _batchnorm(name: str, channels: int, config: ModelConfig) -> BatchNormLayer:
    return BatchNormLayer(
        name=name,
        gamma=np.ones(channels, dtype=default_dtype()),
        beta=zeros((channels,)),
        running_mean=zeros((channels,)),
        running_var=np.ones(channels, dtype=default_dtype()),
        epsilon=config.bn_epsilon,
        momentum=config.bn_momentum,
    )


def build_model(config: ModelConfig) -> Model:
    """Assemble the layer stack with Glorot-uniform weights drawn from ``config.seed``."""
    rng = Rng(config.seed, _INIT_STREAM)
    layers: List[Any] = []

    channels = config.input_channels
    for i, filters in enumerate(config.conv_filters, start=1):
        layers += [
            ConvLayer(f"conv{i}",
                      weights=glorot_uniform(rng, (filters, channels, 3, 3), channels * 9, filters * 9),
                      bias=zeros((filters,))),
            ActivationLayer(f"conv{i}_act", config.activation),
            MaxPoolLayer(f"pool{i}"),
            _batchnorm(f"conv{i}_bn", filters, config),
            DropoutLayer(f"conv{i}_dropout", config.conv_dropout),
        ]
        channels = filters

    layers.append(FlattenLayer("flatten"))
    width = config.flatten_width
    for j, units in enumerate(config.hidden_widths, start=1):
        layers += [
            DenseLayer(f"dense{j}", weights=glorot_uniform(rng, (width, units), width, units), bias=zeros((units,))),
            ActivationLayer(f"dense{j}_act", config.activation),
            _batchnorm(f"dense{j}_bn", units, config),
            DropoutLayer(f"dense{j}_dropout", config.hidden_dropout),
        ]
        width = units

    layers += [
        DenseLayer("output", weights=glorot_uniform(rng, (width, 1), width, 1), bias=zeros((1,))),
        ActivationLayer("output_act", config.output_activation),
    ]

    model = Model(layers=layers, config=config)
    model.optimizer = AdamState.fresh(model.parameters())
    logger.debug(f"Built model: {len(layers)} layers, "
                 f"{sum(p.size for p in model.parameters().values())} parameters, "
                 f"flatten width {config.flatten_width}")
    return model


def _image_size(model: Model) -> int:
    return model.config.image_size if model.config else INPUT_SIZE


def _check_channels(model: Model, index: DatasetIndex) -> None:
    if model.input_channels != index.channels:
        raise ConfigurationError(
            f"Model expects {model.input_channels} input channel(s) but the '{index.mode}' "
            f"dataset provides {index.channels}")


def _calibration_index(train_index: DatasetIndex, cfg: "TrainConfig") -> Optional[DatasetIndex]:
    if not cfg.bn_calibration_images:
        return None
    return stratified_subset(train_index, cfg.bn_calibration_images, cfg.seed)


def _recalibrate(model: Model, index: Optional[DatasetIndex], cfg: "TrainConfig", size: int,
                 epoch: int, batch: int) -> None:
    """Runs after the last training batch; failures are reported one batch past it."""
    if index is None:
        return
    batches = make_batches(index, cfg.batch_size, cfg.seed, epoch=0, threads=cfg.threads,
                           min_last=2, image_size=size, shuffle=False)
    try:
        recalibrate_batchnorm(model, (b.inputs for b in batches))
    except CellScanError as e:
        raise TrainingError(f"Batch-norm calibration failed: {type(e).__name__}: {e}", epoch=epoch, batch=batch) from e


# --- Training and evaluation -----------------------------------------------

def train(
    model: Model,
    train_index: DatasetIndex,
    test_index: DatasetIndex,
    cfg: TrainConfig,
) -> Tuple[Model, List[EpochMetrics]]:
    """
    Run ``cfg.epochs`` passes of mini-batch Adam over the training index.

    The next batch is decoded on a loader thread while the current one is
    processed; delivery order is the seeded shuffle order. After each epoch
    the batch-norm running statistics are re-measured with dropout off over a
    balanced sample of up to ``cfg.bn_calibration_images`` training images, so
    eval-mode inference sees the statistics the current weights produce. A
    zero learning rate leaves the parameters unchanged, though the running
    statistics still move.

    Raises:
        ParameterError: an index is empty
        ConfigurationError: model channels do not match the dataset mode
        TrainingError: a batch failed; names the epoch and batch
    """
    if not len(train_index) or not len(test_index):
        raise ParameterError(f"Training needs non-empty indices, got train={len(train_index)}, test={len(test_index)}")
    _check_channels(model, train_index)
    _check_channels(model, test_index)

    model.optimizer = dataclasses.replace(
        model.optimizer, alpha=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    size = _image_size(model)
    dropout_rng = Rng(cfg.seed, _DROPOUT_STREAM)
    calibration_index = _calibration_index(train_index, cfg)

    logger.info(f"Training on {len(train_index)} images ({train_index.mode}), testing on {len(test_index)}: "
                f"epochs={cfg.epochs}, batch={cfg.batch_size}, lr={cfg.learning_rate}, seed={cfg.seed}")

    history: List[EpochMetrics] = []
    for epoch in range(1, cfg.epochs + 1):
        rng = dropout_rng.derive(epoch)
        batches = make_batches(train_index, cfg.batch_size, cfg.seed, epoch,
                               threads=cfg.threads, min_last=2, image_size=size)
        loss_sum, correct, seen = 0.0, 0, 0
        batch_no = 0

        start_time = time.perf_counter()
        with ThreadPoolExecutor(max_workers=1) as loader:
            pending = loader.submit(next, batches, None)
            while True:
                batch_no += 1
                try:
                    batch = pending.result()
                    if batch is None:
                        break
                    pending = loader.submit(next, batches, None)

                    p, cache = model_forward(model, batch.inputs, "train", rng)
                    loss, dp = bce_loss(p, batch.targets)
                    grads = model_backward(model, cache, dp)
                    new_params, model.optimizer = adam_step(model.parameters(), grads, model.optimizer)
                    model.set_parameters(new_params)
                except CellScanError as e:
                    raise TrainingError(f"{type(e).__name__}: {e}", epoch=epoch, batch=batch_no) from e

                loss_sum += loss * len(batch)
                correct += int(np.sum((p >= DECISION_THRESHOLD) == (batch.targets >= 0.5)))
                seen += len(batch)
        _recalibrate(model, calibration_index, cfg, size, epoch, batch_no)
        wall_seconds = time.perf_counter() - start_time

        eval_start = time.perf_counter()
        test_accuracy = evaluate(model, test_index, batch_size=cfg.batch_size, threads=cfg.threads)
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=loss_sum / seen,
            train_accuracy=correct / seen,
            test_accuracy=test_accuracy,
            wall_seconds=wall_seconds,
        )
        history.append(metrics)
        log_stage_metrics(logger, f"epoch {epoch}/{cfg.epochs}", wall_seconds, {
            'train_loss': round(metrics.train_loss, 5),
            'train_acc': round(metrics.train_accuracy, 4),
            'test_acc': round(metrics.test_accuracy, 4),
            'eval_seconds': round(time.perf_counter() - eval_start, 3),
            'adam_t': model.optimizer.t,
        })

    return model, history


def predict_probabilities(model: Model, index: DatasetIndex, batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Eval-mode probabilities in index order."""
    _check_channels(model, index)
    outputs = []
    for batch in make_batches(index, batch_size, seed=0, epoch=0, threads=threads,
                              image_size=_image_size(model), shuffle=False):
        p, _ = model_forward(model, batch.inputs, "eval")
        outputs.append(p)
    return np.concatenate(outputs)


def evaluate(model: Model, index: DatasetIndex, batch_size: int = 64, threads: int = 1) -> float:
    """Fraction of images whose thresholded prediction (p >= 0.5 is infected) matches the label."""
    if not len(index):
        raise ParameterError("Cannot evaluate on an empty index")
    predictions = predict_probabilities(model, index, batch_size, threads) >= DECISION_THRESHOLD
    return float(np.mean(predictions == (index.labels == int(CellLabel.INFECTED))))


def predict_one(
    model: Model,
    image_path: Union[str, Path],
    mode: str,
    canny_params: Optional[CannyParams] = None,
) -> Tuple[float, str]:
    """
    Probability and label ("infected" / "uninfected") for one raw cell image.

    In canny mode the edge map is computed from the image first, matching how
    the preprocessed corpus was produced.
    """
    if mode not in MODE_CHANNELS:
        raise ParameterError(f"Unknown mode '{mode}'. Must be one of {sorted(MODE_CHANNELS)}.")
    if model.input_channels != MODE_CHANNELS[mode]:
        raise ConfigurationError(f"Model expects {model.input_channels} input channel(s); "
                                 f"'{mode}' mode provides {MODE_CHANNELS[mode]}")
    img = load_image(image_path)
    if mode == "canny":
        img = canny_pipeline(img, canny_params or CannyParams())
    x = to_input_array(img, mode, _image_size(model))[None]
    p, _ = model_forward(model, x, "eval")
    probability = float(p[0])
    label = CellLabel.INFECTED if probability >= DECISION_THRESHOLD else CellLabel.UNINFECTED
    return probability, label.display


# --- Model files -----------------------------------------------------------

class _TensorEntry(BaseModel):
    name: str
    shape: List[int]


class _OptimizerEntry(BaseModel):
    t: int = Field(ge=0)
    alpha: float
    beta1: float
    beta2: float
    epsilon: float


class _ModelHeader(BaseModel):
    config: ModelConfig
    layers: List[Dict[str, Any]]
    dtype: Literal["<f4", "<f8"]
    optimizer: _OptimizerEntry
    tensors: List[_TensorEntry]


def _model_tensors(model: Model) -> Dict[str, np.ndarray]:
    """Every stored tensor in file order: parameters, running statistics, Adam moments."""
    tensors = dict(model.parameters())
    tensors.update(model.buffers())
    for name, param in model.parameters().items():
        tensors[f"adam.m/{name}"] = model.optimizer.m.get(name, np.zeros_like(param))
    for name, param in model.parameters().items():
        tensors[f"adam.v/{name}"] = model.optimizer.v.get(name, np.zeros_like(param))
    return tensors


def _file_dtype(model: Model) -> str:
    return "<f8" if any(p.dtype == np.float64 for p in model.parameters().values()) else "<f4"


def save_model(model: Model, path: Union[str, Path]) -> Path:
    """
    Write a model file.

    Layout: ``MCNN``, u32 LE format version, u64 LE header length, the JSON
    header (config, layer list, dtype, Adam step and hyperparameters, tensor
    table), then every tensor's little-endian values in table order.
    """
    if model.config is None:
        raise ModelStateError("Only models built from a ModelConfig can be saved")
    path = Path(path)
    dtype = _file_dtype(model)
    tensors = _model_tensors(model)
    opt = model.optimizer
    header = _ModelHeader(
        config=model.config,
        layers=model.describe(),
        dtype=dtype,
        optimizer=_OptimizerEntry(t=opt.t, alpha=opt.alpha, beta1=opt.beta1, beta2=opt.beta2, epsilon=opt.epsilon),
        tensors=[_TensorEntry(name=name, shape=list(t.shape)) for name, t in tensors.items()],
    )
    header_bytes = header.model_dump_json().encode("utf-8")

    payload = [MODEL_MAGIC, struct.pack("<IQ", MODEL_FORMAT_VERSION, len(header_bytes)), header_bytes]
    payload += [np.ascontiguousarray(t, dtype=dtype).tobytes() for t in tensors.values()]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(payload))
    except OSError as e:
        raise CorpusIOError(f"Cannot write model file {path}: {e}") from e
    logger.info(f"Saved model to {path.name} ({len(tensors)} tensors, {dtype}, adam t={opt.t})")
    return path


def load_model(path: Union[str, Path]) -> Model:
    """
    Read a file written by ``save_model``.

    Raises:
        CorpusIOError: the file cannot be read
        ModelFormatError: bad magic, version, header or truncation (with byte offset)
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CorpusIOError(f"Cannot read model file {path}: {e}") from e

    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"Bad magic {data[:4]!r} in {path.name}, expected {MODEL_MAGIC!r}", offset=0)
    if len(data) < 16:
        raise ModelFormatError(f"Truncated preamble in {path.name}", offset=len(data))
    version, header_len = struct.unpack_from("<IQ", data, 4)
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"Unsupported model format version {version}", offset=4)
    if 16 + header_len > len(data):
        raise ModelFormatError(f"Truncated header: {header_len} bytes declared", offset=16)
    try:
        header = _ModelHeader.model_validate_json(data[16:16 + header_len])
    except ValidationError as e:
        raise ModelFormatError(f"Malformed header: {e.error_count()} problem(s), first: {e.errors()[0]['msg']}",
                               offset=16) from e

    model = build_model(header.config)
    expected = [(name, list(t.shape)) for name, t in _model_tensors(model).items()]
    if [(t.name, t.shape) for t in header.tensors] != expected:
        raise ModelFormatError("Tensor table does not match the architecture in the header", offset=16)

    dtype = np.dtype(header.dtype)
    offset = 16 + header_len
    values: Dict[str, np.ndarray] = {}
    for entry in header.tensors:
        count = math.prod(entry.shape)
        end = offset + count * dtype.itemsize
        if end > len(data):
            raise ModelFormatError(f"Truncated tensor '{entry.name}'", offset=offset)
        values[entry.name] = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(entry.shape) \
            .astype(dtype.newbyteorder("="))
        offset = end
    if offset != len(data):
        raise ModelFormatError(f"{len(data) - offset} unexpected trailing bytes", offset=offset)

    params = {name: values[name] for name in model.parameters()}
    model.set_parameters(params)
    model.set_buffers({name: values[name] for name in model.buffers()})
    opt = header.optimizer
    model.optimizer = AdamState(
        alpha=opt.alpha, beta1=opt.beta1, beta2=opt.beta2, epsilon=opt.epsilon, t=opt.t,
        m={name: values[f"adam.m/{name}"] for name in params},
        v={name: values[f"adam.v/{name}"] for name in params},
    )
    logger.info(f"Loaded model {path.name} ({len(values)} tensors, adam t={opt.t})")
    return model


# --- Reports ---------------------------------------------------------------

def measure_corpus_bytes(root: Union[str, Path]) -> int:
    """Total size of every PNG file below ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusIOError(f"Corpus directory {root} does not exist")
    return sum(p.stat().st_size for p in root.rglob("*") if p.is_file() and p.suffix.lower() == ".png")


def system_descriptor() -> str:
    processor = platform.processor() or platform.machine() or "unknown processor"
    return (f"{processor}, {os.cpu_count()} CPUs, {platform.system()} {platform.release()}, "
            f"Python {platform.python_version()}, numpy {np.__version__}")


def report_csv_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    return csv_path if csv_path != path else path.with_name(path.stem + ".epochs.csv")


def write_report(report: ExperimentReport, path: Union[str, Path]) -> Tuple[Path, Path]:
    """Write the JSON report and its sibling per-epoch CSV; returns both paths."""
    path = Path(path)
    csv_path = report_csv_path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "train_acc", "test_acc", "wall_seconds"])
            for m in report.epochs:
                writer.writerow([m.epoch, repr(m.train_loss), repr(m.train_accuracy),
                                 repr(m.test_accuracy), repr(m.wall_seconds)])
    except OSError as e:
        raise CorpusIOError(f"Cannot write report {path}: {e}") from e
    logger.info(f"Wrote report {path.name} and {csv_path.name} ({len(report.epochs)} epochs)")
    return path, csv_path


def load_report(path: Union[str, Path]) -> ExperimentReport:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CorpusIOError(f"Cannot read report {path}: {e}") from e
    try:
        return ExperimentReport.model_validate_json(text)
    except ValidationError as e:
        raise ConfigurationError(f"Malformed report {path.name}: {e.errors()[0]['msg']}") from e


_TABLE_MODES = (("raw", "Raw"), ("canny", "CANNY"))


def compare_reports(reports: Sequence[ExperimentReport]) -> str:
    """
    Side-by-side raw vs canny table.

    Runs of one mode are numbered Test1, Test2, ... in seed order. Image size
    is the corpus byte total in megabytes (10^6 bytes).
    """
    if not reports:
        raise ParameterError("No reports to compare")
    by_mode = {mode: sorted((r for r in reports if r.mode == mode), key=lambda r: r.seed)
               for mode, _ in _TABLE_MODES}
    runs = max(len(group) for group in by_mode.values())

    def cell(mode: str, fmt) -> str:
        group = by_mode[mode]
        return fmt(group[0]) if group else "-"

    rows: List[Tuple[str, List[str]]] = []
    for k in range(runs):
        rows.append((f"Accuracy (Test{k + 1})", [
            f"{by_mode[m][k].totals.final_test_accuracy * 100:.2f}%" if k < len(by_mode[m]) else "-"
            for m, _ in _TABLE_MODES]))
    for k in range(runs):
        rows.append((f"Training Time (Test{k + 1}, s)", [
            f"{by_mode[m][k].totals.wall_seconds:.1f}" if k < len(by_mode[m]) else "-"
            for m, _ in _TABLE_MODES]))
    rows += [
        ("Image Size (MB)", [cell(m, lambda r: f"{r.corpus_bytes / 1e6:.0f}") for m, _ in _TABLE_MODES]),
        ("Epoch number", [cell(m, lambda r: str(len(r.epochs))) for m, _ in _TABLE_MODES]),
        ("Best epoch", [cell(m, lambda r: str(r.totals.best_epoch)) for m, _ in _TABLE_MODES]),
        ("Number of images", [cell(m, lambda r: str(r.image_count)) for m, _ in _TABLE_MODES]),
    ]

    label_width = max(len(label) for label, _ in rows) + 2
    col_width = max(12, *(len(v) + 2 for _, values in rows for v in values))
    lines = ["".ljust(label_width) + "".join(title.rjust(col_width) for _, title in _TABLE_MODES)]
    lines.append("-" * len(lines[0]))
    lines += [label.ljust(label_width) + "".join(v.rjust(col_width) for v in values) for label, values in rows]
    systems = sorted({r.system for r in reports})
    lines.append("System: " + "; ".join(systems))
    return "\n".join(lines)


# --- Experiment driver -----------------------------------------------------

@handle_pipeline_errors("run_experiment", "trainer")
def run_experiment(
    data_root: Union[str, Path],
    mode: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    report_path: Optional[Union[str, Path]] = None,
    model_path: Optional[Union[str, Path]] = None,
) -> ExperimentReport:
    """Scan, optionally subset, split, build, train, then save the model and the report."""
    index = scan_dataset(data_root, mode)
    if train_config.subset is not None:
        index = stratified_subset(index, train_config.subset, train_config.seed)
    train_index, test_index = stratified_split(index, train_config.test_fraction, train_config.seed)

    if model_config.input_channels != index.channels:
        raise ConfigurationError(f"Model config expects {model_config.input_channels} channel(s); "
                                 f"'{mode}' data provides {index.channels}")
    model = build_model(model_config)
    model, history = train(model, train_index, test_index, train_config)

    if train_config.subset is None:
        corpus_bytes = measure_corpus_bytes(data_root)
    else:
        corpus_bytes = sum(entry.path.stat().st_size for entry in index.entries)

    report = ExperimentReport.from_epochs(
        mode, history, corpus_bytes,
        seed=train_config.seed,
        image_count=len(index),
        system=system_descriptor(),
        network=model_config,
        training=train_config,
    )
    if model_path is not None:
        save_model(model, model_path)
    if report_path is not None:
        write_report(report, report_path)

    log_stage_metrics(logger, "run_experiment", report.totals.wall_seconds, {
        'mode': mode,
        'images': len(index),
        'final_test_acc': round(report.totals.final_test_accuracy, 4),
        'best_epoch': report.totals.best_epoch,
        'corpus_bytes': corpus_bytes,
    })
    return report
