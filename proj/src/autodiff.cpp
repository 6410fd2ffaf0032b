#include "cap/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace cap {

Graph::NodeId Graph::push(Tensor value, bool requires_grad, std::function<void()> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.back = requires_grad ? std::move(back) : std::function<void()>();
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Graph::grad_buf(NodeId id) {
    Node& n = nodes_[id];
    if (!n.grad_alloc) {
        n.grad = Tensor::zeros(n.value.shape);
        n.grad_alloc = true;
    }
    return n.grad;
}

const Tensor& Graph::grad(NodeId id) const {
    const Node& n = nodes_[id];
    if (!n.requires_grad) {
        throw std::logic_error("graph: grad requested for a node without requires_grad");
    }
    if (!n.grad_alloc) {
        const_cast<Graph*>(this)->grad_buf(id);
    }
    return n.grad;
}

void Graph::check2d(NodeId id, const char* op) const {
    if (nodes_[id].value.rank() != 2) {
        throw std::invalid_argument(std::string(op) + ": rank-2 tensor required, got " +
                                    shape_str(nodes_[id].value));
    }
}

Graph::NodeId Graph::input(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad, {});
}

Graph::NodeId Graph::add(NodeId a, NodeId b) {
    if (!nodes_[a].value.same_shape(nodes_[b].value)) {
        throw std::invalid_argument("add: shape mismatch");
    }
    Tensor out = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a, b] {
            const Tensor& g = nodes_[id].grad;
            if (nodes_[a].requires_grad) {
                Tensor& ga = grad_buf(a);
                for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
            }
            if (nodes_[b].requires_grad) {
                Tensor& gb = grad_buf(b);
                for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
            }
        };
    }
    return id;
}

Graph::NodeId Graph::sub(NodeId a, NodeId b) {
    if (!nodes_[a].value.same_shape(nodes_[b].value)) {
        throw std::invalid_argument("sub: shape mismatch");
    }
    Tensor out = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= bv.data[i];
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a, b] {
            const Tensor& g = nodes_[id].grad;
            if (nodes_[a].requires_grad) {
                Tensor& ga = grad_buf(a);
                for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
            }
            if (nodes_[b].requires_grad) {
                Tensor& gb = grad_buf(b);
                for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] -= g.data[i];
            }
        };
    }
    return id;
}

Graph::NodeId Graph::mul(NodeId a, NodeId b) {
    if (!nodes_[a].value.same_shape(nodes_[b].value)) {
        throw std::invalid_argument("mul: shape mismatch");
    }
    Tensor out = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= bv.data[i];
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a, b] {
            const Tensor& g = nodes_[id].grad;
            if (nodes_[a].requires_grad) {
                Tensor& ga = grad_buf(a);
                const Tensor& bv2 = nodes_[b].value;
                for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * bv2.data[i];
            }
            if (nodes_[b].requires_grad) {
                Tensor& gb = grad_buf(b);
                const Tensor& av = nodes_[a].value;
                for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * av.data[i];
            }
        };
    }
    return id;
}

Graph::NodeId Graph::scale(NodeId a, double c) {
    Tensor out = nodes_[a].value;
    for (double& x : out.data) x *= c;
    bool rg = nodes_[a].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a, c] {
            const Tensor& g = nodes_[id].grad;
            Tensor& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += c * g.data[i];
        };
    }
    return id;
}

Graph::NodeId Graph::add_rowvec(NodeId m, NodeId v) {
    check2d(m, "add_rowvec");
    check2d(v, "add_rowvec");
    const Tensor& mv = nodes_[m].value;
    const Tensor& vv = nodes_[v].value;
    if (vv.rows() != 1 || vv.cols() != mv.cols()) {
        throw std::invalid_argument("add_rowvec: vector shape mismatch");
    }
    Tensor out = mv;
    for (std::size_t i = 0; i < mv.rows(); ++i) {
        for (std::size_t j = 0; j < mv.cols(); ++j) out.at(i, j) += vv.at(0, j);
    }
    bool rg = nodes_[m].requires_grad || nodes_[v].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, m, v] {
            const Tensor& g = nodes_[id].grad;
            if (nodes_[m].requires_grad) {
                Tensor& gm = grad_buf(m);
                for (std::size_t i = 0; i < g.numel(); ++i) gm.data[i] += g.data[i];
            }
            if (nodes_[v].requires_grad) {
                Tensor& gv = grad_buf(v);
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    for (std::size_t j = 0; j < g.cols(); ++j) gv.at(0, j) += g.at(i, j);
                }
            }
        };
    }
    return id;
}

Graph::NodeId Graph::tanh_(NodeId a) {
    Tensor out = nodes_[a].value;
    for (double& x : out.data) x = std::tanh(x);
    bool rg = nodes_[a].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& y = nodes_[id].value;
            Tensor& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.numel(); ++i) {
                ga.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
            }
        };
    }
    return id;
}

Graph::NodeId Graph::sigmoid_(NodeId a) {
    Tensor out = nodes_[a].value;
    for (double& x : out.data) x = 1.0 / (1.0 + std::exp(-x));
    bool rg = nodes_[a].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& y = nodes_[id].value;
            Tensor& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.numel(); ++i) {
                ga.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
            }
        };
    }
    return id;
}

Graph::NodeId Graph::relu_(NodeId a) {
    Tensor out = nodes_[a].value;
    for (double& x : out.data) x = x > 0.0 ? x : 0.0;
    bool rg = nodes_[a].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& xv = nodes_[a].value;
            Tensor& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.numel(); ++i) {
                if (xv.data[i] > 0.0) ga.data[i] += g.data[i];
            }
        };
    }
    return id;
}

Graph::NodeId Graph::matmul(NodeId a, NodeId b) {
    check2d(a, "matmul");
    check2d(b, "matmul");
    Tensor out = cap::matmul(nodes_[a].value, nodes_[b].value);
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a, b] {
            const Tensor& g = nodes_[id].grad;
            if (nodes_[a].requires_grad) {
                Tensor da = cap::matmul_nt(g, nodes_[b].value);
                Tensor& ga = grad_buf(a);
                for (std::size_t i = 0; i < da.numel(); ++i) ga.data[i] += da.data[i];
            }
            if (nodes_[b].requires_grad) {
                Tensor db = cap::matmul_tn(nodes_[a].value, g);
                Tensor& gb = grad_buf(b);
                for (std::size_t i = 0; i < db.numel(); ++i) gb.data[i] += db.data[i];
            }
        };
    }
    return id;
}

Graph::NodeId Graph::matmul_nt(NodeId a, NodeId b) {
    check2d(a, "matmul_nt");
    check2d(b, "matmul_nt");
    Tensor out = cap::matmul_nt(nodes_[a].value, nodes_[b].value);
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a, b] {
            const Tensor& g = nodes_[id].grad;
            if (nodes_[a].requires_grad) {
                Tensor da = cap::matmul(g, nodes_[b].value);
                Tensor& ga = grad_buf(a);
                for (std::size_t i = 0; i < da.numel(); ++i) ga.data[i] += da.data[i];
            }
            if (nodes_[b].requires_grad) {
                Tensor db = cap::matmul_tn(g, nodes_[a].value);
                Tensor& gb = grad_buf(b);
                for (std::size_t i = 0; i < db.numel(); ++i) gb.data[i] += db.data[i];
            }
        };
    }
    return id;
}

Graph::NodeId Graph::matmul_tn(NodeId a, NodeId b) {
    check2d(a, "matmul_tn");
    check2d(b, "matmul_tn");
    Tensor out = cap::matmul_tn(nodes_[a].value, nodes_[b].value);
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a, b] {
            const Tensor& g = nodes_[id].grad;
            if (nodes_[a].requires_grad) {
                Tensor da = cap::matmul_nt(nodes_[b].value, g);
                Tensor& ga = grad_buf(a);
                for (std::size_t i = 0; i < da.numel(); ++i) ga.data[i] += da.data[i];
            }
            if (nodes_[b].requires_grad) {
                Tensor db = cap::matmul(nodes_[a].value, g);
                Tensor& gb = grad_buf(b);
                for (std::size_t i = 0; i < db.numel(); ++i) gb.data[i] += db.data[i];
            }
        };
    }
    return id;
}

Graph::NodeId Graph::row_mean(NodeId a) {
    check2d(a, "row_mean");
    const Tensor& av = nodes_[a].value;
    const std::size_t m = av.rows(), n = av.cols();
    if (m == 0) throw std::invalid_argument("row_mean: empty input");
    Tensor out = Tensor::zeros({1, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out.at(0, j) += av.at(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) out.at(0, j) /= static_cast<double>(m);
    bool rg = nodes_[a].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a, m, n] {
            const Tensor& g = nodes_[id].grad;
            Tensor& ga = grad_buf(a);
            const double inv = 1.0 / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += g.at(0, j) * inv;
            }
        };
    }
    return id;
}

Graph::NodeId Graph::concat_rows(std::span<const NodeId> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    const std::size_t n = nodes_[parts[0]].value.cols();
    std::size_t total = 0;
    bool rg = false;
    for (NodeId p : parts) {
        check2d(p, "concat_rows");
        if (nodes_[p].value.cols() != n) {
            throw std::invalid_argument("concat_rows: column mismatch");
        }
        total += nodes_[p].value.rows();
        rg = rg || nodes_[p].requires_grad;
    }
    Tensor out = Tensor::zeros({total, n});
    std::size_t r = 0;
    for (NodeId p : parts) {
        const Tensor& pv = nodes_[p].value;
        std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + r * n);
        r += pv.rows();
    }
    std::vector<NodeId> own(parts.begin(), parts.end());
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, own, n] {
            const Tensor& g = nodes_[id].grad;
            std::size_t r2 = 0;
            for (NodeId p : own) {
                const std::size_t pr = nodes_[p].value.rows();
                if (nodes_[p].requires_grad) {
                    Tensor& gp = grad_buf(p);
                    for (std::size_t i = 0; i < pr * n; ++i) {
                        gp.data[i] += g.data[r2 * n + i];
                    }
                }
                r2 += pr;
            }
        };
    }
    return id;
}

Graph::NodeId Graph::slice_rows(NodeId a, std::size_t r0, std::size_t r1) {
    check2d(a, "slice_rows");
    const Tensor& av = nodes_[a].value;
    if (r0 >= r1 || r1 > av.rows()) {
        throw std::invalid_argument("slice_rows: bad range");
    }
    const std::size_t n = av.cols();
    Tensor out = Tensor::zeros({r1 - r0, n});
    std::copy(av.data.begin() + r0 * n, av.data.begin() + r1 * n, out.data.begin());
    bool rg = nodes_[a].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a, r0, r1, n] {
            const Tensor& g = nodes_[id].grad;
            Tensor& ga = grad_buf(a);
            for (std::size_t i = 0; i < (r1 - r0) * n; ++i) {
                ga.data[r0 * n + i] += g.data[i];
            }
        };
    }
    return id;
}

Graph::NodeId Graph::softmax_cols(NodeId scores) {
    check2d(scores, "softmax_cols");
    const Tensor& sv = nodes_[scores].value;
    if (!sv.all_finite()) {
        throw std::invalid_argument("softmax: non-finite input value");
    }
    const std::size_t m = sv.rows(), n = sv.cols();
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t j = 0; j < n; ++j) {
        double mx = sv.at(0, j);
        for (std::size_t i = 1; i < m; ++i) mx = std::max(mx, sv.at(i, j));
        double denom = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            out.at(i, j) = std::exp(sv.at(i, j) - mx);
            denom += out.at(i, j);
        }
        for (std::size_t i = 0; i < m; ++i) out.at(i, j) /= denom;
    }
    bool rg = nodes_[scores].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, scores, m, n] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& y = nodes_[id].value;
            Tensor& gs = grad_buf(scores);
            for (std::size_t j = 0; j < n; ++j) {
                double dot = 0.0;
                for (std::size_t i = 0; i < m; ++i) dot += g.at(i, j) * y.at(i, j);
                for (std::size_t i = 0; i < m; ++i) {
                    gs.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
                }
            }
        };
    }
    return id;
}

Graph::NodeId Graph::heads_dot(NodeId k, NodeId q, std::size_t heads) {
    check2d(k, "heads_dot");
    check2d(q, "heads_dot");
    const Tensor& kv = nodes_[k].value;
    const Tensor& qv = nodes_[q].value;
    const std::size_t m = kv.rows(), d = kv.cols();
    if (qv.rows() != 1 || qv.cols() != d || heads == 0 || d % heads != 0) {
        throw std::invalid_argument("heads_dot: bad query/head configuration");
    }
    const std::size_t hd = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor out = Tensor::zeros({m, heads});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
            double s = 0.0;
            for (std::size_t t = 0; t < hd; ++t) {
                s += kv.at(i, h * hd + t) * qv.at(0, h * hd + t);
            }
            out.at(i, h) = s * inv;
        }
    }
    bool rg = nodes_[k].requires_grad || nodes_[q].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, k, q, heads, m, hd, inv] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& kv2 = nodes_[k].value;
            const Tensor& qv2 = nodes_[q].value;
            if (nodes_[k].requires_grad) {
                Tensor& gk = grad_buf(k);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t h = 0; h < heads; ++h) {
                        const double gv = g.at(i, h) * inv;
                        for (std::size_t t = 0; t < hd; ++t) {
                            gk.at(i, h * hd + t) += gv * qv2.at(0, h * hd + t);
                        }
                    }
                }
            }
            if (nodes_[q].requires_grad) {
                Tensor& gq = grad_buf(q);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t h = 0; h < heads; ++h) {
                        const double gv = g.at(i, h) * inv;
                        for (std::size_t t = 0; t < hd; ++t) {
                            gq.at(0, h * hd + t) += gv * kv2.at(i, h * hd + t);
                        }
                    }
                }
            }
        };
    }
    return id;
}

Graph::NodeId Graph::heads_mix(NodeId a, NodeId v) {
    check2d(a, "heads_mix");
    check2d(v, "heads_mix");
    const Tensor& av = nodes_[a].value;
    const Tensor& vv = nodes_[v].value;
    const std::size_t m = av.rows(), heads = av.cols(), d = vv.cols();
    if (vv.rows() != m || heads == 0 || d % heads != 0) {
        throw std::invalid_argument("heads_mix: shape mismatch");
    }
    const std::size_t hd = d / heads;
    Tensor out = Tensor::zeros({1, d});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
            const double w = av.at(i, h);
            for (std::size_t t = 0; t < hd; ++t) {
                out.at(0, h * hd + t) += w * vv.at(i, h * hd + t);
            }
        }
    }
    bool rg = nodes_[a].requires_grad || nodes_[v].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, a, v, m, heads, hd] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& av2 = nodes_[a].value;
            const Tensor& vv2 = nodes_[v].value;
            if (nodes_[a].requires_grad) {
                Tensor& ga = grad_buf(a);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t h = 0; h < heads; ++h) {
                        double s = 0.0;
                        for (std::size_t t = 0; t < hd; ++t) {
                            s += g.at(0, h * hd + t) * vv2.at(i, h * hd + t);
                        }
                        ga.at(i, h) += s;
                    }
                }
            }
            if (nodes_[v].requires_grad) {
                Tensor& gv = grad_buf(v);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t h = 0; h < heads; ++h) {
                        const double w = av2.at(i, h);
                        for (std::size_t t = 0; t < hd; ++t) {
                            gv.at(i, h * hd + t) += w * g.at(0, h * hd + t);
                        }
                    }
                }
            }
        };
    }
    return id;
}

Graph::NodeId Graph::layer_norm_rows(NodeId x, NodeId gamma, NodeId beta, double eps) {
    check2d(x, "layer_norm_rows");
    check2d(gamma, "layer_norm_rows");
    check2d(beta, "layer_norm_rows");
    const Tensor& xv = nodes_[x].value;
    const std::size_t m = xv.rows(), n = xv.cols();
    const Tensor& gv = nodes_[gamma].value;
    const Tensor& bv = nodes_[beta].value;
    if (gv.rows() != 1 || gv.cols() != n || bv.rows() != 1 || bv.cols() != n) {
        throw std::invalid_argument("layer_norm_rows: gamma/beta length mismatch");
    }
    if (eps < 0.0) throw std::invalid_argument("layer_norm_rows: negative eps");
    Tensor out = Tensor::zeros({m, n});
    Tensor xhat = Tensor::zeros({m, n});
    std::vector<double> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xv.at(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double c = xv.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[i] = inv;
        for (std::size_t j = 0; j < n; ++j) {
            xhat.at(i, j) = (xv.at(i, j) - mean) * inv;
            out.at(i, j) = xhat.at(i, j) * gv.at(0, j) + bv.at(0, j);
        }
    }
    bool rg = nodes_[x].requires_grad || nodes_[gamma].requires_grad ||
              nodes_[beta].requires_grad;
    NodeId id = push(std::move(out), rg, {});
    if (rg) {
        auto xh = std::make_shared<Tensor>(std::move(xhat));
        auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
        nodes_[id].back = [this, id, x, gamma, beta, m, n, xh, istd] {
            const Tensor& g = nodes_[id].grad;
            const Tensor& gv2 = nodes_[gamma].value;
            if (nodes_[gamma].requires_grad) {
                Tensor& gg = grad_buf(gamma);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        gg.at(0, j) += g.at(i, j) * xh->at(i, j);
                    }
                }
            }
            if (nodes_[beta].requires_grad) {
                Tensor& gb = grad_buf(beta);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) gb.at(0, j) += g.at(i, j);
                }
            }
            if (nodes_[x].requires_grad) {
                Tensor& gx = grad_buf(x);
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_gy = 0.0, mean_gyx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gy = g.at(i, j) * gv2.at(0, j);
                        mean_gy += gy;
                        mean_gyx += gy * xh->at(i, j);
                    }
                    mean_gy /= static_cast<double>(n);
                    mean_gyx /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gy = g.at(i, j) * gv2.at(0, j);
                        gx.at(i, j) += (*istd)[i] * (gy - mean_gy - xh->at(i, j) * mean_gyx);
                    }
                }
            }
        };
    }
    return id;
}

Graph::NodeId Graph::cross_entropy(NodeId logits, std::size_t label) {
    check2d(logits, "cross_entropy");
    const Tensor& lv = nodes_[logits].value;
    if (lv.rows() != 1) throw std::invalid_argument("cross_entropy: logits must be 1 x K");
    if (label >= lv.cols()) throw std::out_of_range("cross_entropy: label out of range");
    const double loss = cap::cross_entropy(lv.data, label);
    bool rg = nodes_[logits].requires_grad;
    // push() may reallocate nodes_, so anything derived from lv is computed
    // before the new node exists.
    auto probs = rg ? std::make_shared<std::vector<double>>(softmax(lv.data)) : nullptr;
    NodeId id = push(Tensor({1, 1}, {loss}), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, logits, label, probs] {
            const double g = nodes_[id].grad.data[0];
            Tensor& gl = grad_buf(logits);
            for (std::size_t j = 0; j < gl.numel(); ++j) {
                gl.data[j] += g * ((*probs)[j] - (j == label ? 1.0 : 0.0));
            }
        };
    }
    return id;
}

Graph::NodeId Graph::mean_scalars(std::span<const NodeId> scalars) {
    if (scalars.empty()) throw std::invalid_argument("mean_scalars: empty");
    double sum = 0.0;
    bool rg = false;
    for (NodeId s : scalars) {
        if (nodes_[s].value.numel() != 1) {
            throw std::invalid_argument("mean_scalars: non-scalar part");
        }
        sum += nodes_[s].value.data[0];
        rg = rg || nodes_[s].requires_grad;
    }
    const double n = static_cast<double>(scalars.size());
    std::vector<NodeId> own(scalars.begin(), scalars.end());
    NodeId id = push(Tensor({1, 1}, {sum / n}), rg, {});
    if (rg) {
        nodes_[id].back = [this, id, own, n] {
            const double g = nodes_[id].grad.data[0] / n;
            for (NodeId s : own) {
                if (nodes_[s].requires_grad) grad_buf(s).data[0] += g;
            }
        };
    }
    return id;
}

void Graph::backward(NodeId root) {
    if (backward_done_) {
        throw std::logic_error("graph: backward already run; build a fresh graph");
    }
    if (nodes_[root].value.numel() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got " +
                                    shape_str(nodes_[root].value));
    }
    backward_done_ = true;
    grad_buf(root).data[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Node& n = nodes_[i];
        if (n.back && n.grad_alloc) n.back();
    }
}

} // namespace cap
