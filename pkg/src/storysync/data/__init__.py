from .dataset import StoryBatch, collate, generate_dataset, load_dataset
from .records import (GroupLoadError, NonCompliantGroupError, StoryGroup, ValidationReport, character_crop,
                      extract_shared_description, generate_synthetic_group, load_story_group, make_id_bucket,
                      to_tensor_image, to_uint8_image, validate_group, write_story_group)
from .synthetic import COLORS, SCENES, SHAPES, IdentitySpec, identity_pool, rasterize_character
