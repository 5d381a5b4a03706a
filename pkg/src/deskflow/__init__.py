"""deskflow: finetune small GPT-style models end to end on a single CPU."""

__version__ = "0.1.0"

from .data import Dataset, SftTemplate, Tokenizer, extend_vocabulary, load_dataset, train_bpe  # noqa: E402
from .model import LoraConfig, ModelConfig, TransformerModel, attach_lora, load_model, merge_lora, save_model  # noqa: E402
from .train import TrainConfig, train_pretrain, train_sft  # noqa: E402
from .align import RaftConfig, RewardModel, raft_train, train_reward  # noqa: E402
from .infer import GenParams, SpecConfig, generate, speculative_decode  # noqa: E402
from .evaluation import EvalReport, evaluate, perplexity  # noqa: E402

__all__ = [
    "Dataset", "SftTemplate", "Tokenizer", "extend_vocabulary", "load_dataset", "train_bpe",
    "LoraConfig", "ModelConfig", "TransformerModel", "attach_lora", "load_model", "merge_lora", "save_model",
    "TrainConfig", "train_pretrain", "train_sft",
    "RaftConfig", "RewardModel", "raft_train", "train_reward",
    "GenParams", "SpecConfig", "generate", "speculative_decode",
    "EvalReport", "evaluate", "perplexity",
]
