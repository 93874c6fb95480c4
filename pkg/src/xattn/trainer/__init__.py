from .schedule import lr_at
from .optim import AdamW
from .protocols import PROTOCOLS, freeze_except, group_hash, trainable_names
from .finetune import Phase, TrainResult, curriculum_plan, finetune
from .pretrain import MlmResult, mlm_perplexity, pretrain_backbone, pretrain_qcross
