"""Shared builders for toy tiny_text_v1 checkpoints and datasets."""

import json
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import pytest

import constants
import runtime
from checkpoint_store import ArchDescriptor, Checkpoint
from evaluation import LabeledDataset


def make_checkpoint(rng: np.random.Generator, labels: List[str], vocab_size: int = 64, embed_dim: int = 6,
                    hidden_dim: int = 5, role: str = constants.ROLE_FINE_TUNED,
                    base: Optional[Checkpoint] = None, scale: float = 0.5) -> Checkpoint:
    """Random checkpoint; with `base`, non-head tensors are base plus noise."""
    arch = ArchDescriptor(constants.FAMILY_TINY_TEXT_V1, vocab_size, embed_dim, hidden_dim, len(labels))
    tensors = {}
    for name, shape in arch.expected_shapes().items():
        noise = rng.normal(0.0, scale, size=shape)
        if base is not None and name not in constants.HEAD_TENSORS:
            noise = base.tensors[name].astype(np.float64) + 0.1 * noise
        tensors[name] = noise.astype(np.float32)
    return Checkpoint(arch=arch, tensors=tensors, label_space=list(labels), role=role).validate()


def random_text(rng: np.random.Generator, words: int = 8) -> str:
    return " ".join(f"tok{int(i)}" for i in rng.integers(0, 10_000, size=words))


def write_jsonl(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for text, label in examples:
            f.write(json.dumps({"text": text, "expected_label": label}) + "\n")


def pick_words(prefix: str, vocab_size: int, count: int, taken: set) -> List[str]:
    """Words whose token ids are distinct from each other and from `taken`."""
    words = []
    i = 0
    while len(words) < count:
        word = f"{prefix}{i}"
        token = runtime.tokenize(word, vocab_size)[0]
        if token not in taken and token != constants.RESERVED_TOKEN_ID:
            taken.add(token)
            words.append(word)
        i += 1
    return words


GUARD_VOCAB = 4096
GUARD_EMBED = 8
GUARD_HIDDEN = 8
STRENGTH = 30.0


@dataclass
class GuardFixture:
    base: Checkpoint
    jailbreak: Checkpoint
    hate: Checkpoint
    jailbreak_set: LabeledDataset
    hate_set: LabeledDataset
    keywords: Dict[str, str]


def build_guard_models(seed: int = 7, examples: int = 200, overlap: bool = False) -> GuardFixture:
    """
    Base plus two fine-tuned guards whose task vectors touch disjoint weights
    (optionally with a few overlapping ones). Each guard fires on one keyword
    token and classifies its own dataset perfectly.
    """
    rng = np.random.default_rng(seed)
    taken: set = set()
    jb_word, hate_word, offensive_word = pick_words("kw", GUARD_VOCAB, 3, taken)
    fillers = pick_words("fill", GUARD_VOCAB, 40, taken)

    def token(word):
        return runtime.tokenize(word, GUARD_VOCAB)[0]

    embed = np.zeros((GUARD_VOCAB, GUARD_EMBED), dtype=np.float32)
    embed[token(jb_word), 0] = 1.0
    embed[token(hate_word), 1] = 1.0
    embed[token(offensive_word), 2] = 1.0

    def checkpoint(labels, role, dense_w, dense_b, head_w, head_b):
        arch = ArchDescriptor(constants.FAMILY_TINY_TEXT_V1, GUARD_VOCAB, GUARD_EMBED, GUARD_HIDDEN, len(labels))
        return Checkpoint(
            arch=arch,
            tensors={
                constants.EMBED_WEIGHT: embed.copy(),
                constants.DENSE_WEIGHT: dense_w.astype(np.float32),
                constants.DENSE_BIAS: dense_b.astype(np.float32),
                constants.HEAD_WEIGHT: head_w.astype(np.float32),
                constants.HEAD_BIAS: head_b.astype(np.float32),
            },
            label_space=labels,
            role=role,
        ).validate()

    zeros_w = np.zeros((GUARD_EMBED, GUARD_HIDDEN))
    zeros_b = np.zeros(GUARD_HIDDEN)
    base = checkpoint(["neg", "pos"], constants.ROLE_BASE, zeros_w, zeros_b,
                      rng.normal(size=(GUARD_HIDDEN, 2)), rng.normal(size=2))

    jb_w, jb_b = zeros_w.copy(), zeros_b.copy()
    jb_w[0, 0] = STRENGTH
    jb_head = np.zeros((GUARD_HIDDEN, 2))
    jb_head[0] = [-10.0, 10.0]

    hate_w, hate_b = zeros_w.copy(), zeros_b.copy()
    hate_w[1, 4] = STRENGTH
    hate_w[2, 5] = STRENGTH
    hate_head = np.zeros((GUARD_HIDDEN, 3))
    hate_head[4, 0] = 10.0
    hate_head[5, 1] = 10.0

    if overlap:
        hate_w[0, 0] = -5.0
        jb_b[6] = 0.5
        hate_b[6] = -0.25

    jailbreak = checkpoint(["benign", "jailbreak"], constants.ROLE_FINE_TUNED, jb_w, jb_b,
                           jb_head, np.array([5.0, -5.0]))
    hate = checkpoint(["hate", "offensive", "normal"], constants.ROLE_FINE_TUNED, hate_w, hate_b,
                      hate_head, np.array([-5.0, -5.0, 0.0]))

    def sentence(keyword):
        words = list(rng.choice(fillers, size=int(rng.integers(3, 7))))
        if keyword:
            words.insert(int(rng.integers(0, len(words) + 1)), keyword)
        return " ".join(words)

    jb_examples = []
    for i in range(examples):
        positive = i % 2 == 0
        jb_examples.append((sentence(jb_word if positive else None), "jailbreak" if positive else "benign"))

    hate_examples = []
    for i in range(examples):
        label = ("hate", "offensive", "normal")[i % 3]
        keyword = {"hate": hate_word, "offensive": offensive_word}.get(label)
        hate_examples.append((sentence(keyword), label))

    return GuardFixture(
        base=base,
        jailbreak=jailbreak,
        hate=hate,
        jailbreak_set=LabeledDataset("jailbreak_set", jb_examples, mixed=True),
        hate_set=LabeledDataset("hate_set", hate_examples, mixed=True),
        keywords={"jailbreak": jb_word, "hate": hate_word, "offensive": offensive_word},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def base_checkpoint(rng):
    return make_checkpoint(rng, ["base_a", "base_b"], role=constants.ROLE_BASE)


@pytest.fixture
def fine_tuned_pair(rng, base_checkpoint):
    first = make_checkpoint(rng, ["benign", "jailbreak"], base=base_checkpoint)
    second = make_checkpoint(rng, ["hate", "offensive", "normal"], base=base_checkpoint)
    return first, second


@pytest.fixture(scope="session")
def guard():
    return build_guard_models()


@pytest.fixture(scope="session")
def overlapping_guard():
    return build_guard_models(overlap=True)
