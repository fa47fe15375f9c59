"""Highlight-guided greedy decoding for a small GPT-style model."""

try:
    from ._core import (
        HighlighterError,
        Model,
        ModelConfig,
        activated_softmax,
        align_span,
        attention_bias,
        band_gap,
        build_uncond,
        combine_logits,
        contribution,
        decode,
        encode,
        generate,
        probe_report,
    )
except ImportError:  # in-tree build: _core sits next to the package
    from _core import (
        HighlighterError,
        Model,
        ModelConfig,
        activated_softmax,
        align_span,
        attention_bias,
        band_gap,
        build_uncond,
        combine_logits,
        contribution,
        decode,
        encode,
        generate,
        probe_report,
    )

__all__ = [
    "HighlighterError",
    "Model",
    "ModelConfig",
    "activated_softmax",
    "align_span",
    "attention_bias",
    "band_gap",
    "build_uncond",
    "combine_logits",
    "contribution",
    "decode",
    "encode",
    "generate",
    "probe_report",
]
