"""
Policy persistence for Quiet Meter
Compressed array container with a JSON header and a content checksum
"""

from pathlib import Path
from typing import Dict, Any, Optional, Tuple, Union
import hashlib
import json
import logging
import zipfile
import zlib

import numpy as np

from core.synthesis import PolicyTable

logger = logging.getLogger(__name__)

POLICY_FORMAT_VERSION = 1


class PolicyIntegrityError(ValueError):
    """Policy file is unreadable or its checksum does not match"""


class PolicyVersionError(ValueError):
    """Policy file was written by an unsupported format version"""


class PolicyShapeError(ValueError):
    """Policy lattice does not match the configured lattice"""


def _checksum(kernels: np.ndarray, stage_risk: np.ndarray, output_grid: np.ndarray) -> str:
    digest = hashlib.sha256()
    for array in (kernels, stage_risk, output_grid):
        digest.update(np.ascontiguousarray(array, dtype=np.float64).tobytes())
    return digest.hexdigest()


def _header(table: PolicyTable) -> Dict[str, Any]:
    return {
        'format_version': POLICY_FORMAT_VERSION,
        'shape': list(table.shape),
        'horizon': table.horizon,
        'q': table.q,
        'e': table.e,
        'belief_resolution': table.belief_resolution,
        'hypothesis_count': table.hypothesis_count,
        'd_min': table.d_min,
        'd_max': table.d_max,
        'model_digest': table.model_digest,
        'ess_digest': table.ess_digest,
        'checksum': _checksum(table.kernels, table.stage_risk, table.output_grid),
    }


def save_policy(table: PolicyTable, path: Union[str, Path]) -> Path:
    """
    Save a policy table

    Args:
        table: Policy to persist
        path: Destination file, written exactly as given

    Returns:
        Path of the written file
    """
    save_path = Path(path)
    save_path.parent.mkdir(parents=True, exist_ok=True)

    header = _header(table)
    with open(save_path, 'wb') as f:
        np.savez_compressed(
            f,
            header=np.array(json.dumps(header, sort_keys=True)),
            kernels=table.kernels,
            stage_risk=table.stage_risk,
            output_grid=table.output_grid,
        )

    logger.info(f"Policy saved to {save_path} (shape {tuple(header['shape'])})")
    return save_path


def load_policy(
    path: Union[str, Path],
    expected_shape: Optional[Tuple[int, ...]] = None
) -> PolicyTable:
    """
    Load a policy table and verify its header and checksum

    Args:
        path: Policy file
        expected_shape: Kernel shape (N, B, Z, X, Y) the caller is configured for

    Raises:
        FileNotFoundError: If the file does not exist
        PolicyIntegrityError: On truncation, corruption or checksum mismatch
        PolicyVersionError: On an unsupported format version
        PolicyShapeError: If the stored shape differs from expected_shape
    """
    load_path = Path(path)
    if not load_path.exists():
        raise FileNotFoundError(f"Policy file not found: {path}")

    try:
        with np.load(load_path, allow_pickle=False) as archive:
            header = json.loads(str(archive['header']))
            kernels = archive['kernels']
            stage_risk = archive['stage_risk']
            output_grid = archive['output_grid']
    except (zipfile.BadZipFile, zlib.error, OSError, EOFError, KeyError, ValueError) as e:
        raise PolicyIntegrityError(f"Cannot read policy file {load_path}: {e}") from e

    version = header.get('format_version')
    if version != POLICY_FORMAT_VERSION:
        raise PolicyVersionError(
            f"Policy format version {version} is not supported (expected {POLICY_FORMAT_VERSION})"
        )

    if _checksum(kernels, stage_risk, output_grid) != header.get('checksum'):
        raise PolicyIntegrityError(f"Checksum mismatch in {load_path}")

    stored_shape = tuple(header['shape'])
    if tuple(kernels.shape) != stored_shape:
        raise PolicyIntegrityError(f"Header shape {stored_shape} disagrees with stored kernels {kernels.shape}")
    if expected_shape is not None and tuple(expected_shape) != stored_shape:
        raise PolicyShapeError(
            f"Policy shape {stored_shape} does not match configured shape {tuple(expected_shape)}"
        )

    logger.info(f"Policy loaded from {load_path} (shape {stored_shape})")
    return PolicyTable(
        kernels=kernels,
        stage_risk=stage_risk,
        output_grid=output_grid,
        q=float(header['q']),
        e=float(header['e']),
        belief_resolution=int(header['belief_resolution']),
        hypothesis_count=int(header['hypothesis_count']),
        d_min=float(header['d_min']),
        d_max=float(header['d_max']),
        model_digest=header['model_digest'],
        ess_digest=header['ess_digest'],
    )
