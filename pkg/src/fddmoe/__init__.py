"""End-to-end FDD multi-user MIMO precoding with a shared sparse MoE-Transformer trunk."""
from .channels import ChannelDataset, TaskConfig, generate, load_dataset, save_dataset, split
from .endtoend import PRESETS, ModelBundle, ModelConfig, forward_end_to_end
from .training import TrainPlan, finetune, pretrain_mtl, train, train_cep, train_dsc, train_stl

__version__ = "0.1.0"
