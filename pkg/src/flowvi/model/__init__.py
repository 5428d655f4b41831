from flowvi.model.batch import Batch, bow_embedding, make_batch
from flowvi.model.decoding import Hypothesis, beam_search, decode_batch, greedy_decode, model_scorer
from flowvi.model.sumodel import (
    GATE_INITS,
    ModelConfig,
    RefinedGate,
    SumModel,
    decode_states,
    encode,
    forward,
    gate_fuse,
    gate_scores,
    posterior,
)
from flowvi.model.tokenizer import BOS, EOS, PAD, SPECIALS, UNK, Tokenizer
