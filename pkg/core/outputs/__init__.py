"""
Output adapters for exporting experiment reports
"""
from typing import Dict, Any, List
from .base_adapter import OutputAdapter
from .markdown_adapter import MarkdownAdapter
from .yaml_adapter import YamlAdapter

ADAPTERS = {
    'markdown': MarkdownAdapter,
    'yaml': YamlAdapter,
}


def create_output_adapter(format_name: str, config: Dict[str, Any]) -> OutputAdapter:
    """
    Factory function to create output adapters

    Args:
        format_name: Name of the format (markdown, yaml)
        config: Configuration dictionary for the adapter

    Returns:
        OutputAdapter instance

    Raises:
        ValueError: If format is unknown
    """
    if format_name not in ADAPTERS:
        raise ValueError(f"Unknown output format: {format_name}")

    adapter = ADAPTERS[format_name](config)
    adapter.validate_config()
    return adapter


def get_available_adapters() -> List[str]:
    return sorted(ADAPTERS)


__all__ = [
    'OutputAdapter',
    'MarkdownAdapter',
    'YamlAdapter',
    'create_output_adapter',
    'get_available_adapters'
]
