"""
Configuration module for the synergic nodule system
Loads settings from environment variables
"""

import logging
import os

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)


class Config:
    """Base configuration"""

    # Reproducibility
    SEED = int(os.getenv('SYNERGIC_SEED', '0'))

    # Patch geometry
    SIDE = int(os.getenv('SYNERGIC_SIDE', '64'))
    SPACING = float(os.getenv('SYNERGIC_SPACING', '0.5'))  # mm/voxel

    # Compute
    DEVICE = os.getenv('SYNERGIC_DEVICE', 'cpu')
    NUM_THREADS = int(os.getenv('SYNERGIC_NUM_THREADS', '0'))  # 0 = torch default
    PREFETCH_DEPTH = int(os.getenv('SYNERGIC_PREFETCH_DEPTH', '4'))

    # Retrieval
    RETRIEVAL_K = int(os.getenv('SYNERGIC_K', '20'))

    # Logging
    LOG_LEVEL = os.getenv('SYNERGIC_LOG_LEVEL', 'INFO').upper()

    @staticmethod
    def validate():
        """Validate configuration"""
        errors = []

        if Config.SIDE < 16 or Config.SIDE % 4 != 0:
            errors.append(f"SYNERGIC_SIDE={Config.SIDE} must be >= 16 and divisible by 4")

        if Config.SPACING <= 0:
            errors.append(f"SYNERGIC_SPACING={Config.SPACING} must be positive")

        if Config.RETRIEVAL_K < 1:
            errors.append(f"SYNERGIC_K={Config.RETRIEVAL_K} must be at least 1")

        if Config.PREFETCH_DEPTH < 1:
            errors.append(f"SYNERGIC_PREFETCH_DEPTH={Config.PREFETCH_DEPTH} must be at least 1")

        if not isinstance(logging.getLevelName(Config.LOG_LEVEL), int):
            errors.append(f"SYNERGIC_LOG_LEVEL={Config.LOG_LEVEL} is not a logging level")

        for error in errors:
            logger.warning("[Config] %s", error)

        return len(errors) == 0
