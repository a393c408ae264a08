# a config small enough to run end to end in a few seconds
TINY = {
    "n_scenes": 6,
    "pretrain_scenes": 2,
    "seeds": [0],
    "classifier": {"channels": [2, 2, 2, 2, 2], "negative_max_coverage": 0.3},
    "classifier_train": {"epochs": 1},
    "subnet_train": {"epochs": 1},
    "batch_per_image": 8,
}
