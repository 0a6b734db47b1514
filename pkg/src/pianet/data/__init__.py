"""Volume I/O, preprocessing, tiling, augmentation, patches and phantoms."""

from .volume import CubeSample, Nodule, ScanAnnotation, Volume, boxes_to_world, filter_annotation, nodule_boxes
