#pragma once

#include "cap/autodiff.hpp"
#include "cap/optim.hpp"

#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

namespace cap::testutil {

// Builds a scalar loss from graph inputs registered in ParamSet order.
using LossBuilder =
    std::function<Graph::NodeId(Graph&, const std::vector<Graph::NodeId>&)>;

inline double eval_loss(const ParamSet& ps, const LossBuilder& build) {
    Graph g;
    std::vector<Graph::NodeId> ids;
    ids.reserve(ps.size());
    for (const auto& t : ps.values) ids.push_back(g.input(t, false));
    return g.value(build(g, ids)).data[0];
}

// Central finite differences against the tape, every coordinate of every
// parameter. Mixed absolute/relative tolerance: smooth losses at this scale
// put the h^2 truncation error well under 1e-4.
inline void check_grads(ParamSet ps, const LossBuilder& build, double h = 1e-3,
                        double tol = 1e-4) {
    Graph g;
    std::vector<Graph::NodeId> ids;
    ids.reserve(ps.size());
    for (const auto& t : ps.values) ids.push_back(g.input(t, true));
    Graph::NodeId loss = build(g, ids);
    g.backward(loss);
    std::vector<Tensor> autograd;
    autograd.reserve(ps.size());
    for (Graph::NodeId id : ids) autograd.push_back(g.grad(id));

    for (std::size_t p = 0; p < ps.size(); ++p) {
        for (std::size_t j = 0; j < ps.at(p).numel(); ++j) {
            const double keep = ps.at(p).data[j];
            ps.at(p).data[j] = keep + h;
            const double fp = eval_loss(ps, build);
            ps.at(p).data[j] = keep - h;
            const double fm = eval_loss(ps, build);
            ps.at(p).data[j] = keep;
            const double fd = (fp - fm) / (2.0 * h);
            const double ad = autograd[p].data[j];
            const double err = std::abs(ad - fd) / std::max(1.0, std::abs(fd));
            INFO("param ", ps.name(p), " coord ", j, ": tape ", ad, " fd ", fd);
            CHECK(err < tol);
        }
    }
}

} // namespace cap::testutil
