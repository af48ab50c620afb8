#pragma once

#include "cvattn/config_json.hpp"
#include "cvattn/train.hpp"

namespace cvattn {

inline json to_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"seed", c.seed},
                {"lr", c.lr},
                {"weight_decay", c.weight_decay},
                {"dice_weight", c.dice_weight},
                {"bce_weight", c.bce_weight},
                {"aug", to_json(c.aug)},
                {"checkpoint_cadence", c.checkpoint_cadence},
                {"out_dir", c.out_dir}};
}

inline TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.dice_weight = j.value("dice_weight", c.dice_weight);
    c.bce_weight = j.value("bce_weight", c.bce_weight);
    if (j.contains("aug")) c.aug = augment_toggles_from_json(j["aug"]);
    c.checkpoint_cadence = j.value("checkpoint_cadence", c.checkpoint_cadence);
    c.out_dir = j.value("out_dir", c.out_dir);
    return c;
}

}  // namespace cvattn
