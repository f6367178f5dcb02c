"""NanoFlowNet: a numpy implementation of a tiny optical-flow CNN, its training,
int8 quantization and a flow-balance obstacle-avoidance simulator."""
from .analysis import analyze, count_macs, count_params
from .control import ControllerConfig, flow_balance_error, yaw_rate
from .quant import quantize_network
from .sim import EpisodeConfig, World, cluttered_world, open_world, run_episode
from .stdc import NetworkConfig, build_nanoflownet, nanoflownet_config, nanoflownet_s_config
from .synthetic import SyntheticCfg, generate_synthetic
from .train import TrainConfig, train

__version__ = "0.1.0"
