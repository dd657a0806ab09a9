"""Single-frame video-language training with multi-frame ensemble inference."""
from .config import ModelConfig
from .model import EncodedSequence, FusedOutput, VideoTextModel
from .tokenizer import TokenSequence, WordTokenizer

__version__ = "0.1.0"

__all__ = ["ModelConfig", "VideoTextModel", "EncodedSequence", "FusedOutput", "TokenSequence", "WordTokenizer",
           "__version__"]
