from .pipeline import PipelineConfig, QuantPipeline

__all__ = ["PipelineConfig", "QuantPipeline"]
