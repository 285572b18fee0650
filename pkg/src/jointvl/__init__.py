"""jointvl: a joint vision-language transformer with switchable
self-attention mask schemes, trained and evaluated end to end on a
synthetic image/report corpus."""

from .config import ModelConfig, RunConfig, default_config, load_config
from .corpus import (Corpus, FindingSpec, Study, default_finding_spec,
                     gen_dataset, load_dataset, rule_labeler)
from .masks import (AttentionMask, MaskScheme, MixedSchedule, SequenceLayout,
                    build_layout, build_mask, sample_scheme)
from .model import JointModel
from .vocab import TokenSequence, Vocabulary, detokenize, tokenize

__version__ = "0.1.0"

__all__ = [
    "AttentionMask", "Corpus", "FindingSpec", "JointModel", "MaskScheme",
    "MixedSchedule", "ModelConfig", "RunConfig", "SequenceLayout", "Study",
    "TokenSequence", "Vocabulary", "build_layout", "build_mask",
    "default_config", "default_finding_spec", "detokenize", "gen_dataset",
    "load_config", "load_dataset", "rule_labeler", "sample_scheme", "tokenize",
]
