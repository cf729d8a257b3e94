"""Persistent storage operations for run artifacts.

This module provides the functions every other module uses to put files on disk:
checkpoints, UAP files, stage results, manifests, reports and CSV summaries. All
storage functions return status dictionaries for error handling, and never write
outside the base directory they are given.

Storage Functions:
    - to_store(): Save raw bytes under a base directory (optionally in a sub-folder)
    - json_to_store(): Serialize a dictionary as indented, key-sorted JSON and store it
    - store_or_raise(): Same as to_store() but raising IOFailure on failure

Typical Usage:
    >>> from hdp_lab.storage import json_to_store
    >>>
    >>> result = json_to_store(file_name='report.json', payload={'avg_acc': 91.2},
    ...                        base_path='runs/p1_hdp')
    >>> if result['statusCode'] == 0:
    ...     print(result['file_path'])

Important Notes:
    - All storage functions return dictionaries with 'statusCode': 0 (success) or -1 (failure)
    - Parent directories are created automatically
    - JSON output is key-sorted so repeated runs produce byte-identical files
"""

from hdp_lab import logger
from hdp_lab.errors import IOFailure
from pathlib import Path
from typing import Optional, Dict, Any
import json


def to_store(*,
             file_name: str,
             content: bytes,
             base_path: str | Path,
             folder: Optional[str] = None,
             ) -> Dict[str, Any]:
    """Store file content under a base directory.

    Args:
        file_name: Name of the file to save.
        content: File content as bytes.
        base_path: Directory that owns the output. Created if missing.
        folder: Optional subdirectory within base_path. Defaults to None.

    Returns:
        Dictionary with 'statusCode' (0 on success, -1 on failure) and, on success,
        'file_path' containing the full path of the saved file.
    """
    response = {
        'statusCode': 0
    }

    target_dir = Path(base_path).expanduser()
    if folder:
        target_dir = target_dir / folder

    file_path = target_dir / file_name

    try:
        target_dir.mkdir(parents=True, exist_ok=True)
        file_path.write_bytes(content)
        logger.info('File %s was saved to %s', file_name, file_path)
        response['file_path'] = str(file_path)
    except Exception as e:
        logger.error('Failed to save file %s to %s. Details: %s', file_name, file_path, e)
        response['statusCode'] = -1

    return response


def json_to_store(*,
                  file_name: str,
                  payload: Dict[str, Any] | list,
                  base_path: str | Path,
                  folder: Optional[str] = None,
                  ) -> Dict[str, Any]:
    """Serialize a JSON payload and store it with to_store().

    Keys are sorted and floats written with Python's shortest repr, so identical
    payloads always give identical bytes.

    Args:
        file_name: Name of the JSON file.
        payload: JSON-serializable dictionary or list.
        base_path: Directory that owns the output.
        folder: Optional subdirectory within base_path.

    Returns:
        Status dictionary as returned by to_store().
    """
    try:
        content = json.dumps(payload, indent=2, sort_keys=True, default=str).encode('utf-8')
    except (TypeError, ValueError) as e:
        logger.error('Failed to serialize %s: %s', file_name, e)
        return {'statusCode': -1}

    return to_store(file_name=file_name, content=content + b"\n", base_path=base_path, folder=folder)


def store_or_raise(response: Dict[str, Any]) -> Path:
    """Return the stored path of a successful status dictionary.

    Args:
        response: Status dictionary from to_store() or json_to_store().

    Returns:
        Path of the written file.

    Raises:
        IOFailure: If the status code signals a failure.
    """
    if response.get('statusCode', -1) != 0 or 'file_path' not in response:
        raise IOFailure("Failed to write output file; see log for details")
    return Path(response['file_path'])


__all__ = [
    'to_store',
    'json_to_store',
    'store_or_raise',
]
