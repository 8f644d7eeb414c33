import argparse
import logging
import os

logging.basicConfig(format='[%(asctime)s][%(levelname)s][%(name)s] - %(message)s', level=logging.INFO)
logger = logging.getLogger("launch")
# Set up logging
to_skip = ["urllib3", "PIL", "accelerate", "matplotlib", "h5py", "asyncio", "torchvision", "safetensors"]
for skip in to_skip:
    logging.getLogger(skip).setLevel(logging.WARNING)


def set_log_level(level: str):
    logging.getLogger().setLevel(level.upper())


def preload(parser: argparse.ArgumentParser):
    if os.name == "posix":
        # For now disable Torch2 Dynamo
        os.environ["TORCHDYNAMO_DISABLE"] = "1"
    parser.add_argument("--config", type=str, default=None,
                        help="Path to a JSON run config; dotted --section.key=value flags override it.")
    parser.add_argument("--seed", type=int, default=None, help="Run seed; every subsystem seed derives from it.")
    parser.add_argument("--log-level", type=str, default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Root logger level.")
    parser.add_argument("--no-progress", action="store_true", help="Disable progress bars.")
    parser.add_argument("--force-cpu", action="store_true", help="Run on the CPU even when CUDA is available.")
