import glob
import os
from typing import Optional

LATEST_RUN = '.latest_run'


def make_run_dir(out_dir: str, experiment_id: str) -> str:
    """Create <out_dir>/<experiment_id>/ and point <out_dir>/.latest_run at it"""
    path = os.path.join(out_dir, experiment_id)
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(out_dir, LATEST_RUN), 'w') as f:
        f.write(path)
    return path


def get_latest_run(out_dir: str) -> Optional[str]:
    """Path of the most recent run directory under out_dir, if any"""
    pointer = os.path.join(out_dir, LATEST_RUN)
    if os.path.exists(pointer):
        with open(pointer, 'r') as f:
            path = f.read().strip()
            if os.path.exists(path):
                return path
    return None


def get_latest_file(pattern, directory=None, out_dir='results'):
    """Find latest file matching pattern in directory (the latest run by default)"""
    if directory is None:
        directory = get_latest_run(out_dir)
        if directory is None:
            return None

    full_pattern = os.path.join(directory, pattern)
    files = glob.glob(full_pattern)
    if not files:
        return None
    return max(files, key=os.path.getctime)
