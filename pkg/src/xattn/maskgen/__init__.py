from .masks import (
    AttentionScheme,
    MaskKind,
    MaskPair,
    build_dropout_mask,
    build_interfering,
    build_noninterfering,
    dump_masks,
    expected_masks,
    full_attention_mask,
    masks_for,
    pad_masks,
    stack_masks,
    tag_sequence,
)
