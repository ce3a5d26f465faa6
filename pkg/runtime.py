"""
Reference tiny_text_v1 classifier: hash tokenizer -> mean-pooled embedding ->
tanh dense layer -> linear head, read out with a per-segment softmax.

Matrix-vector products are written as broadcast-multiply + sum over axis 0 in
float64, so a logit depends only on its own head column. Zero-padded columns
therefore leave the other logits bit-for-bit unchanged.
"""

import re
import logging
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

import constants
from checkpoint_store import Checkpoint
from errors import StructuralError
from hm3_transform import SegmentLayout
from services.external_evaluator import run_external_evaluator
from utils import fnv1a_64

logger = logging.getLogger(__name__)

# Alphanumeric runs; everything else separates tokens
TOKEN_PATTERN = re.compile(r"[^\W_]+")


@lru_cache(maxsize=65536)
def _token_id(token: str, vocab_size: int) -> int:
    return fnv1a_64(token.encode("utf-8")) % vocab_size


def tokenize(text: str, vocab_size: int) -> List[int]:
    """Lowercase, split on non-alphanumeric runs, hash each token into the vocabulary."""
    if vocab_size < 2:
        raise StructuralError("invalid_vocab_size", vocab_size=vocab_size)
    tokens = TOKEN_PATTERN.findall(text.lower())
    if not tokens:
        return [constants.RESERVED_TOKEN_ID]
    return [_token_id(token, vocab_size) for token in tokens[:constants.MAX_TOKENS]]


def _matvec(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # weight is [in, out]; rows accumulate in order, one output column at a time
    return (x[:, None] * weight.astype(np.float64)).sum(axis=0) + bias.astype(np.float64)


def forward(cp: Checkpoint, toks: Sequence[int]) -> np.ndarray:
    """Logits of length head_out_dim."""
    vocab_size = cp.arch.vocab_size
    for token in toks:
        if not 0 <= token < vocab_size:
            raise StructuralError("token_out_of_range", token=token, vocab_size=vocab_size)

    pooled = cp.tensors[constants.EMBED_WEIGHT][list(toks)].astype(np.float64).mean(axis=0)
    hidden = np.tanh(_matvec(pooled, cp.tensors[constants.DENSE_WEIGHT], cp.tensors[constants.DENSE_BIAS]))
    return _matvec(hidden, cp.tensors[constants.HEAD_WEIGHT], cp.tensors[constants.HEAD_BIAS])


def softmax_star(logits: np.ndarray, layout: SegmentLayout) -> Dict[str, np.ndarray]:
    """Numerically stable softmax applied to each segment separately."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (layout.total_width,):
        raise StructuralError("layout_mismatch", actual=logits.size, expected=layout.total_width)

    distribution = {}
    for segment in layout.segments:
        part = logits[segment.offset:segment.end]
        exps = np.exp(part - part.max())
        distribution[segment.model_id] = exps / exps.sum()
    return distribution


def predict_logits(logits: np.ndarray, layout: SegmentLayout) -> Dict[str, Tuple[str, float]]:
    distribution = softmax_star(logits, layout)
    predictions = {}
    for segment in layout.segments:
        probs = distribution[segment.model_id]
        # argmax picks the lowest index on ties
        index = int(np.argmax(probs))
        predictions[segment.model_id] = (segment.labels[index], float(probs[index]))
    return predictions


def predict(cp: Checkpoint, layout: SegmentLayout, text: str) -> Dict[str, Tuple[str, float]]:
    """Per segment: the argmax label and its probability."""
    return predict_logits(forward(cp, tokenize(text, cp.arch.vocab_size)), layout)


def external_evaluate(command: str, checkpoint_path: Union[str, Path],
                      dataset_paths: Sequence[Union[str, Path]], layout_path: Union[str, Path]) -> dict:
    """Run an external evaluator and return the EvalReport it prints."""
    return run_external_evaluator(command, checkpoint_path, dataset_paths, layout_path)
