"""Procedural ShapeScenes dataset, tokenization, subset sampling and persistence."""
from prompt_decoupler.scenedata.generator import DatasetSpec, SceneDataset, SceneGenerator, SceneSample, generate
from prompt_decoupler.scenedata.sampling import few_shot, restrict_to_classes, split_base_novel, subset_fraction
from prompt_decoupler.scenedata.storage import DatasetStore, load_dataset, save_dataset
from prompt_decoupler.scenedata.textures import BACKGROUND_NAMES
from prompt_decoupler.scenedata.tokenizer import Tokenizer, class_names, render_background, render_foreground

__all__ = [
    "BACKGROUND_NAMES",
    "DatasetSpec",
    "DatasetStore",
    "SceneDataset",
    "SceneGenerator",
    "SceneSample",
    "Tokenizer",
    "class_names",
    "few_shot",
    "generate",
    "load_dataset",
    "render_background",
    "render_foreground",
    "restrict_to_classes",
    "save_dataset",
    "split_base_novel",
    "subset_fraction",
]
