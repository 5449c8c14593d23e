import os
from dotenv import load_dotenv

load_dotenv()


class Config:
    # Output
    OUTPUT_ROOT: str = os.getenv('LEAKWATCH_OUTPUT_ROOT', 'runs')
    NO_TIMESTAMP: bool = os.getenv('LEAKWATCH_NO_TIMESTAMP', 'False').lower() == 'true'

    # Logging
    LOG_LEVEL: str = os.getenv('LEAKWATCH_LOG_LEVEL', 'INFO')

    # Parallel run/sweep jobs; every job is single-threaded
    JOBS: int = int(os.getenv('LEAKWATCH_JOBS', '1'))

    # Pipeline config used when --config is not given
    CONFIG_PATH: str = os.getenv('LEAKWATCH_CONFIG', '')


config = Config()
