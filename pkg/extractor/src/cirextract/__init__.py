"""Bundle extraction for the cirfuse retrieval engine."""

from .adapters import DatasetView, QueryRecord, load_dataset
from .cache import ContentCache, content_key
from .config import ExtractionConfig
from .errors import BackendError, ConfigError, ExtractorError, TransportError
from .llm import LlmClient, gen_f_add, gen_modified_captions
from .pipeline import Runtime, export_bundle
from .templates import PromptTemplate, default_template, load_template

__version__ = "0.1.0"
