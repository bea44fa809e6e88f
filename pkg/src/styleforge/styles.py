"""The two transfer styles and their control-token mapping."""

from __future__ import annotations

from enum import Enum

from .tokenizer import SOURCE_STYLE_ID, TARGET_STYLE_ID


class StyleLabel(Enum):
    """Style a sentence belongs to, or the style a generator must produce."""

    SOURCE = "source"
    TARGET = "target"

    @property
    def token_id(self) -> int:
        return SOURCE_STYLE_ID if self is StyleLabel.SOURCE else TARGET_STYLE_ID

    def opposite(self) -> "StyleLabel":
        return StyleLabel.TARGET if self is StyleLabel.SOURCE else StyleLabel.SOURCE
