"""Zero-shot transfer evaluation and attention stability."""

from .transfer import (
    CellResult,
    EvalResult,
    EvalSetting,
    SettingKind,
    TransferReport,
    enumerate_cells,
    evaluate,
    resolve_eval_key,
    transfer_matrix,
)
from .stability import StabilityReport, align, attention_stability, row_similarity
