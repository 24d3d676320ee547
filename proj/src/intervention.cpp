#include "neuron_probe/intervention.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace neuron_probe {

std::string to_string(const InterventionTarget& target) {
    return std::visit([](const auto& ref) { return to_string(ref); }, target);
}

namespace {

// Position pins do not matter for parameter zeroing, so two refs that differ
// only in position address the same parameters.
InterventionTarget canonical(const InterventionTarget& t) {
    if (const auto* n = std::get_if<NeuronRef>(&t)) {
        NeuronRef c = *n;
        c.position.reset();
        return c;
    }
    return t;
}

void zero_column(Tensor& t, std::size_t col) {
    const auto cols = t.shape()[1];
    auto v = t.mutable_values();
    for (std::size_t r = 0; r < t.shape()[0]; ++r) v[r * cols + col] = 0.0f;
}

void zero_rows(Tensor& t, std::size_t first, std::size_t count) {
    const auto cols = t.shape().size() > 1 ? t.shape()[1] : 1;
    auto v = t.mutable_values();
    std::fill(v.begin() + static_cast<std::ptrdiff_t>(first * cols),
              v.begin() + static_cast<std::ptrdiff_t>((first + count) * cols), 0.0f);
}

} // namespace

void validate(const InterventionSpec& spec, const ModelSpec& model_spec) {
    std::set<InterventionTarget> seen;
    for (const auto& t : spec.targets) {
        std::visit([&](const auto& ref) { validate(ref, model_spec); }, t);
        if (!seen.insert(canonical(t)).second) {
            throw std::invalid_argument("intervention lists " + to_string(t) + " more than once");
        }
    }
}

Model apply_intervention(const Model& model, const InterventionSpec& spec) {
    validate(spec, model.spec);
    Model out = model;
    const auto dh = static_cast<std::size_t>(model.spec.head_dim());
    for (const auto& t : spec.targets) {
        if (const auto* n = std::get_if<NeuronRef>(&t)) {
            auto& lw = out.weights.layers[static_cast<std::size_t>(n->layer)];
            if (n->site == Site::Ffn) {
                zero_column(lw.fc2, static_cast<std::size_t>(n->index));
            } else {
                zero_column(lw.wo, static_cast<std::size_t>(n->head) * dh + static_cast<std::size_t>(n->index));
            }
        } else {
            const auto& h = std::get<HeadRef>(t);
            auto& lw = out.weights.layers[static_cast<std::size_t>(h.layer)];
            const std::size_t first = static_cast<std::size_t>(h.head) * dh;
            zero_rows(lw.wq, first, dh);
            zero_rows(lw.wk, first, dh);
            zero_rows(lw.wv, first, dh);
            for (std::size_t c = first; c < first + dh; ++c) zero_column(lw.wo, c);
            for (Tensor* b : {&lw.bq, &lw.bk, &lw.bv}) {
                if (!b->empty()) zero_rows(*b, first, dh);
            }
        }
    }
    return out;
}

InterventionSpec merge(const InterventionSpec& a, const InterventionSpec& b) {
    InterventionSpec out{a.targets, a.label + "+" + b.label};
    std::set<InterventionTarget> seen;
    for (const auto& t : a.targets) seen.insert(canonical(t));
    for (const auto& t : b.targets) {
        if (seen.insert(canonical(t)).second) out.targets.push_back(t);
    }
    return out;
}

} // namespace neuron_probe
