#pragma once

#include "neuron_probe/model.hpp"

#include <string>
#include <variant>
#include <vector>

namespace neuron_probe {

using InterventionTarget = std::variant<NeuronRef, HeadRef>;

std::string to_string(const InterventionTarget& target);

/// A set of neurons or heads whose parameters are zeroed.
struct InterventionSpec {
    std::vector<InterventionTarget> targets;
    std::string label;

    static InterventionSpec identity() { return {{}, "identity"}; }
    bool is_identity() const { return targets.empty(); }
};

/// Throws std::invalid_argument on duplicates, std::out_of_range on bad refs.
void validate(const InterventionSpec& spec, const ModelSpec& model_spec);

/// Returns an intervened copy; `model` is never modified. An FFN neuron zeroes
/// its fc2 column, an attention neuron its wo column (any position pin is
/// ignored, parameters are position-free), and a head zeroes its rows of
/// wq/wk/wv, its columns of wo, and its slices of bq/bk/bv. The shared output
/// bias bo is left in place.
Model apply_intervention(const Model& model, const InterventionSpec& spec);

/// Union of two specs (duplicates dropped), labelled "a+b".
InterventionSpec merge(const InterventionSpec& a, const InterventionSpec& b);

} // namespace neuron_probe
