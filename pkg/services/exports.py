"""
Exports
Attention-weight and positional-encoding similarity dumps, with validators
that read them back against their schemas
"""

import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import List, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from services.environments import Environment
from services.errors import ExportFormatError, NotApplicableError
from services.model import DTQN, QNetwork, model_dtype, q_last, window_tensor

logger = logging.getLogger(__name__)

ATTENTION_COLUMNS = ["step", "layer", "head", "row", "column", "weight"]
# readers that plot attention hide weights below this; the file keeps them all
DISPLAY_THRESHOLD = 0.2
ROW_SUM_TOLERANCE = 1e-6


class AttentionRecord(NamedTuple):
    step: int
    layer: int
    head: int
    row: int
    column: int
    weight: float


def export_attention(model: QNetwork, env: Environment, seed: int, path) -> int:
    """Roll one greedy episode and write every causal attention weight at every decision.

    Returns the number of decisions recorded.
    """
    if not isinstance(model, DTQN):
        raise NotApplicableError("attention export needs a transformer model, not the MLP baseline")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    k = model.config.context_len

    history = [env.reset(rng)]
    decisions = 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ATTENTION_COLUMNS)
        with torch.no_grad():
            while True:
                window = window_tensor(history, k, model_dtype(model))
                output = model(window, capture_attention=True)
                for layer, weights in enumerate(output.attention):
                    weights = weights[0].double().numpy()  # (heads, L, L)
                    for head in range(weights.shape[0]):
                        for row in range(weights.shape[1]):
                            for column in range(row + 1):
                                writer.writerow([decisions, layer, head, row, column,
                                                 "%.17g" % weights[head, row, column]])
                action = int(torch.argmax(q_last(output, window.shape[-2] - 1)[0]).item())
                decisions += 1
                result = env.step(action, rng)
                if result.done:
                    break
                history.append(result.observation)
    logger.info(f"🔍 Attention export: {decisions} decisions written to {path}")
    return decisions


def read_attention_export(path) -> List[AttentionRecord]:
    """Parse an attention export and check it against its schema"""
    path = Path(path)
    records = []
    sums = defaultdict(float)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ATTENTION_COLUMNS:
            raise ExportFormatError(f"{path}: header {header}, expected {ATTENTION_COLUMNS}")
        for line_number, fields in enumerate(reader, start=2):
            if len(fields) != len(ATTENTION_COLUMNS):
                raise ExportFormatError(f"{path}:{line_number}: expected 6 fields, got {len(fields)}")
            try:
                record = AttentionRecord(*(int(v) for v in fields[:5]), float(fields[5]))
            except ValueError as e:
                raise ExportFormatError(f"{path}:{line_number}: {e}") from e
            if record.column > record.row:
                raise ExportFormatError(f"{path}:{line_number}: column {record.column} is after row {record.row}")
            if not 0.0 <= record.weight <= 1.0:
                raise ExportFormatError(f"{path}:{line_number}: weight {record.weight} outside [0, 1]")
            sums[record[:4]] += record.weight
            records.append(record)
    for key, total in sums.items():
        if abs(total - 1.0) > ROW_SUM_TOLERANCE:
            raise ExportFormatError(f"{path}: step/layer/head/row {key} sums to {total!r}")
    return records


def strong_weights(records: List[AttentionRecord], threshold: float = DISPLAY_THRESHOLD) -> List[AttentionRecord]:
    """Records a plot would draw: weights at or above the display threshold"""
    return [record for record in records if record.weight >= threshold]


def posenc_similarity(model: QNetwork) -> np.ndarray:
    """k x k cosine similarity between position vectors (0 where a vector is all zeros)"""
    if not isinstance(model, DTQN) or model.positions.kind == "none":
        raise NotApplicableError("positional-encoding similarity needs pos_kind learned or sinusoidal")
    with torch.no_grad():
        pos = model.positions.vectors(dtype=torch.float64).double()
        similarity = F.cosine_similarity(pos.unsqueeze(1), pos.unsqueeze(0), dim=-1)
    return similarity.numpy()


def export_posenc_similarity(model: QNetwork, path) -> np.ndarray:
    similarity = posenc_similarity(model)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, similarity, fmt="%.17g", delimiter=",")
    logger.info(f"🔍 Positional-encoding similarity ({similarity.shape[0]}x{similarity.shape[0]}) written to {path}")
    return similarity


def read_posenc_export(path) -> np.ndarray:
    try:
        matrix = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise ExportFormatError(f"{path}: {e}") from e
    if matrix.shape[0] != matrix.shape[1]:
        raise ExportFormatError(f"{path}: matrix is {matrix.shape[0]}x{matrix.shape[1]}, expected square")
    if np.any(np.abs(matrix) > 1.0 + 1e-9):
        raise ExportFormatError(f"{path}: cosine similarity outside [-1, 1]")
    return matrix
