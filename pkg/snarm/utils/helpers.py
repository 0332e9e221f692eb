"""
Helper utility functions
"""

import os
from pathlib import Path
from typing import List, Union

IMAGE_FORMATS = [".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"]


def ensure_dir(directory: Union[str, Path]) -> Path:
    """
    Ensure a directory exists, create if it doesn't

    Args:
        directory: Directory path

    Returns:
        The directory as a Path
    """
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    return path


def is_valid_image_format(filename: Union[str, Path], allowed_formats: List[str] = IMAGE_FORMATS) -> bool:
    """
    Check if a file has a supported image extension

    Args:
        filename: Filename to check
        allowed_formats: List of allowed extensions (e.g., ['.png', '.jpg'])

    Returns:
        True if valid format
    """
    ext = os.path.splitext(str(filename))[1].lower()
    return ext in allowed_formats


def sanitize_filename(filename: str) -> str:
    """
    Turn an image id such as "cat/test/crack/000" into a flat file name

    Args:
        filename: Original name, possibly containing separators

    Returns:
        Sanitized filename
    """
    unsafe_chars = ["/", "\\", "..", "<", ">", ":", '"', "|", "?", "*"]
    for char in unsafe_chars:
        filename = filename.replace(char, "__" if char in ("/", "\\") else "_")
    return filename


def list_images(directory: Union[str, Path]) -> List[Path]:
    """Image files of a directory in lexicographic order"""
    directory = Path(directory)
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.is_file() and is_valid_image_format(p.name))
