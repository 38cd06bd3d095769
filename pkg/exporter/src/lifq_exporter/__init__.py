from .backbone import VARIANTS, StageBackbone
from .export import ExportJob, ExportResult, export_features, verify_roundtrip
from .lifq_format import LifqFormatError, read_record, write_record

__version__ = "0.1.0"
