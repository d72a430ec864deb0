"""Hand-structure attention enhancement: token tagging and biased cross-attention."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyPrompt, IndexOutOfRange, InvalidRange
from .tensor import Tensor

DEFAULT_ALPHA = 2.0

VERBS = frozenset("""
be is are was were am appear seem look smile stand sit walk run lie kneel lean pose rest
hold grasp grip wave point touch reach shake clap catch throw lift press type play eat drink
cut wrap carry pick pull push open close write draw paint use make take give put raise pet
feed brush wash hug slice stir pour tap swipe scroll grab squeeze pinch stretch rub scratch
knit sew peel chop cook serve hit swing kick ride drive fly read count show offer adjust fold
""".split())

IRREGULAR = frozenset("""
held caught threw thrown ate eaten drank drunk took taken gave given made wrote written drew
drawn stood sat ran lay lain knelt leant leaned shook shaken rode ridden drove driven flew
flown swung
""".split())

NOT_VERBS_ING = frozenset("""
thing something nothing anything everything ring king wing string spring ceiling building
morning evening clothing sling earring sibling pudding
""".split())

FUNCTION_WORDS = frozenset("""
a an the one two both his her their its my your our this that these those with and or but
while at in on of to from by near towards into onto over under around behind beside it he she
they we i you him them
""".split())

INDEX_RULES = ("union", "intersection")


def _clean(token):
    return re.sub(r"[^a-z]", "", token.lower())


def _is_verb(word):
    if word in VERBS or word in IRREGULAR:
        return True
    if word.endswith("ing") and len(word) > 4 and word not in NOT_VERBS_ING:
        return True
    if word.endswith("es") and word[:-2] in VERBS:
        return True
    if word.endswith("s") and word[:-1] in VERBS:
        return True
    if word.endswith("ed") and (word[:-2] in VERBS or word[:-1] in VERBS):
        return True
    return False


def pos_tag(token):
    """Coarse tag of one whitespace token: VERB, NOUN or OTHER."""
    word = _clean(token)
    if not word:
        return "OTHER"
    if _is_verb(word):
        return "VERB"
    if word in FUNCTION_WORDS:
        return "OTHER"
    return "NOUN"


@dataclass(frozen=True)
class TaggedPrompt:
    tokens: tuple
    tags: tuple
    index_list: tuple


def tag_hand_tokens(prompt, rule="union"):
    """Tag whitespace tokens and pick the hand-related indices.

    An index is selected when its token is a verb or contains ``hand``
    (``rule="union"``), or when both hold (``rule="intersection"``).
    ``prompt`` may be a string or an already split token sequence.
    """
    if rule not in INDEX_RULES:
        raise InvalidRange(f"index rule must be one of {INDEX_RULES}, got {rule!r}")
    tokens = tuple(prompt.split() if isinstance(prompt, str) else prompt)
    if not tokens:
        raise EmptyPrompt("cannot tag an empty prompt")
    tags = tuple(pos_tag(t) for t in tokens)
    picked = []
    for i, (tok, tag) in enumerate(zip(tokens, tags)):
        verb, hand = tag == "VERB", "hand" in tok.lower()
        if (verb or hand) if rule == "union" else (verb and hand):
            picked.append(i)
    return TaggedPrompt(tokens=tokens, tags=tags, index_list=tuple(picked))


@dataclass(frozen=True)
class BiasSpec:
    alpha: float = DEFAULT_ALPHA
    index_list: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.alpha >= 0.0:
            raise InvalidRange(f"bias alpha must be >= 0, got {self.alpha}")
        object.__setattr__(self, "index_list", frozenset(int(i) for i in self.index_list))


def build_bias(spec, q_count, k_count):
    """[q_count x k_count] matrix with ``alpha`` in every column of the index list."""
    bad = [i for i in spec.index_list if not 0 <= i < k_count]
    if bad:
        raise IndexOutOfRange(f"token indices {sorted(bad)} outside 0..{k_count - 1}")
    b = np.zeros((q_count, k_count))
    if spec.index_list:
        b[:, sorted(spec.index_list)] = spec.alpha
    return Tensor(b)


def biased_cross_attention(phi, c_t, weights, spec=None, return_map=False):
    """Cross-attention from image tokens ``phi`` [N x C] to the prompt ``c_t``.

    ``weights`` is a :class:`sesa.nn.CrossAttention`; ``spec`` adds its bias
    matrix to the logits before the softmax.
    """
    ctx = c_t.embeddings
    bias = None if spec is None else build_bias(spec, phi.shape[0], ctx.shape[0])
    out, m = weights(phi, ctx, bias)
    return (out, m) if return_map else out


def attention_mass(m_cross, index_list):
    """Mean over queries of the attention mass on the selected keys."""
    data = m_cross.data if isinstance(m_cross, Tensor) else np.asarray(m_cross)
    idx = sorted(index_list)
    if not idx:
        return 0.0
    return float(data[:, idx].sum(axis=1).mean())
