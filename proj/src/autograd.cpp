#include "tcupgan/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace tcupgan::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

Var make_node(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool needs = false;
    for (const auto& in : inputs) needs = needs || (in && in->requires_grad);
    if (needs) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward_fn = std::move(fn);
    }
    return node;
}

float sigmoidf(float x) {
    if (x >= 0.0f) {
        const float z = std::exp(-x);
        return 1.0f / (1.0f + z);
    }
    const float z = std::exp(x);
    return z / (1.0f + z);
}

void check_same(const Shape& a, const Shape& b, const char* op) {
    if (!(a == b)) throw ShapeError(std::string(op) + ": " + a.str() + " vs " + b.str());
}

int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

void im2col(const float* x, int cin, int h, int w, int k, int stride, int pad, int oh, int ow,
            float* col) {
    const int p = oh * ow;
    for (int c = 0; c < cin; ++c) {
        const float* plane = x + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * p;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    float* dst = row + oy * ow;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + ow, 0.0f);
                        continue;
                    }
                    const float* src = plane + static_cast<std::size_t>(iy) * w;
                    if (stride == 1) {
                        const int lo = std::max(0, pad - kx);
                        const int hi = std::min(ow, w + pad - kx);
                        for (int ox = 0; ox < lo; ++ox) dst[ox] = 0.0f;
                        for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox - pad + kx];
                        for (int ox = std::max(hi, lo); ox < ow; ++ox) dst[ox] = 0.0f;
                    } else {
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

void col2im(const float* col, int cin, int h, int w, int k, int stride, int pad, int oh, int ow,
            float* x) {
    const int p = oh * ow;
    for (int c = 0; c < cin; ++c) {
        float* plane = x + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * p;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    float* dst = plane + static_cast<std::size_t>(iy) * w;
                    const float* src = row + oy * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor& Node::ensure_grad() {
    if (grad.empty() && value.size() > 0) grad = Tensor(value.shape());
    return grad;
}

Var constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return node;
}

Var leaf(Tensor value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return node;
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
    const Shape xs = x->value.shape();
    const Shape ws = weight->value.shape();
    if (ws.c != xs.c || ws.h != ws.w) {
        throw ShapeError("conv2d: input " + xs.str() + " incompatible with weight " + ws.str());
    }
    if (bias && bias->value.size() != static_cast<std::size_t>(ws.n)) {
        throw ShapeError("conv2d: bias size does not match output channels");
    }
    const int k = ws.h;
    const int oh = conv_out(xs.h, k, stride, padding);
    const int ow = conv_out(xs.w, k, stride, padding);
    if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: empty output for input " + xs.str());
    const int kk = xs.c * k * k;
    const int p = oh * ow;
    const bool pointwise = (k == 1 && stride == 1 && padding == 0);

    Tensor out(Shape{xs.n, ws.n, oh, ow});
    ConstMapMat wmat(weight->value.data(), ws.n, kk);
    FloatBuffer col(pointwise ? 0 : static_cast<std::size_t>(kk) * p);
    for (int n = 0; n < xs.n; ++n) {
        const float* xin = x->value.sample(n).data();
        MapMat y(out.sample(n).data(), ws.n, p);
        if (pointwise) {
            y.noalias() = wmat * ConstMapMat(xin, kk, p);
        } else {
            im2col(xin, xs.c, xs.h, xs.w, k, stride, padding, oh, ow, col.data());
            y.noalias() = wmat * ConstMapMat(col.data(), kk, p);
        }
        if (bias) {
            for (int co = 0; co < ws.n; ++co) y.row(co).array() += bias->value.data()[co];
        }
    }

    return make_node(std::move(out), {x, weight, bias},
                     [=](Node& self) {
                         const Var& in = self.inputs[0];
                         const Var& wt = self.inputs[1];
                         const Var& b = self.inputs[2];
                         ConstMapMat wm(wt->value.data(), ws.n, kk);
                         FloatBuffer colbuf(static_cast<std::size_t>(kk) * p);
                         for (int n = 0; n < xs.n; ++n) {
                             ConstMapMat dy(self.grad.sample(n).data(), ws.n, p);
                             const float* xin = in->value.sample(n).data();
                             if (wt->requires_grad) {
                                 MapMat dw(wt->ensure_grad().data(), ws.n, kk);
                                 if (pointwise) {
                                     dw.noalias() += dy * ConstMapMat(xin, kk, p).transpose();
                                 } else {
                                     im2col(xin, xs.c, xs.h, xs.w, k, stride, padding, oh, ow,
                                            colbuf.data());
                                     dw.noalias() +=
                                         dy * ConstMapMat(colbuf.data(), kk, p).transpose();
                                 }
                             }
                             if (b && b->requires_grad) {
                                 float* db = b->ensure_grad().data();
                                 for (int co = 0; co < ws.n; ++co) db[co] += dy.row(co).sum();
                             }
                             if (in->requires_grad) {
                                 float* dx = in->ensure_grad().sample(n).data();
                                 if (pointwise) {
                                     MapMat(dx, kk, p).noalias() += wm.transpose() * dy;
                                 } else {
                                     MapMat dcol(colbuf.data(), kk, p);
                                     dcol.noalias() = wm.transpose() * dy;
                                     col2im(colbuf.data(), xs.c, xs.h, xs.w, k, stride, padding,
                                            oh, ow, dx);
                                 }
                             }
                         }
                     });
}

Var add(const Var& a, const Var& b) {
    check_same(a->value.shape(), b->value.shape(), "add");
    Tensor out = a->value;
    out.add_inplace(b->value);
    return make_node(std::move(out), {a, b}, [](Node& self) {
        for (const Var& in : self.inputs) {
            if (in->requires_grad) in->ensure_grad().add_inplace(self.grad);
        }
    });
}

Var sigmoid(const Var& x) {
    Tensor out(x->value.shape());
    const float* src = x->value.data();
    float* dst = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) dst[i] = sigmoidf(src[i]);
    return make_node(std::move(out), {x}, [](Node& self) {
        float* dx = self.inputs[0]->ensure_grad().data();
        const float* y = self.value.data();
        const float* dy = self.grad.data();
        for (std::size_t i = 0; i < self.value.size(); ++i) dx[i] += dy[i] * y[i] * (1.0f - y[i]);
    });
}

Var leaky_relu(const Var& x, float slope) {
    Tensor out(x->value.shape());
    const float* src = x->value.data();
    float* dst = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) dst[i] = src[i] > 0.0f ? src[i] : slope * src[i];
    return make_node(std::move(out), {x}, [slope](Node& self) {
        const float* xin = self.inputs[0]->value.data();
        float* dx = self.inputs[0]->ensure_grad().data();
        const float* dy = self.grad.data();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
            dx[i] += xin[i] > 0.0f ? dy[i] : slope * dy[i];
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
    const Shape s = x->value.shape();
    if (gamma->value.size() != static_cast<std::size_t>(s.c) ||
        beta->value.size() != static_cast<std::size_t>(s.c)) {
        throw ShapeError("layer_norm: affine parameters must have one entry per channel");
    }
    const std::size_t m = static_cast<std::size_t>(s.c) * s.plane();
    Tensor out(s);
    Tensor xhat(s);
    std::vector<float> inv_std(s.n);
    for (int n = 0; n < s.n; ++n) {
        auto in = x->value.sample(n);
        double sum = 0.0;
        for (float v : in) sum += v;
        const double mean = sum / static_cast<double>(m);
        double sq = 0.0;
        for (float v : in) sq += (v - mean) * (v - mean);
        const double var = sq / static_cast<double>(m);
        const float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
        inv_std[n] = istd;
        auto xh = xhat.sample(n);
        auto y = out.sample(n);
        for (int c = 0; c < s.c; ++c) {
            const float g = gamma->value.data()[c];
            const float b = beta->value.data()[c];
            for (std::size_t i = c * s.plane(); i < (c + 1) * s.plane(); ++i) {
                xh[i] = static_cast<float>((in[i] - mean) * istd);
                y[i] = g * xh[i] + b;
            }
        }
    }
    return make_node(
        std::move(out), {x, gamma, beta},
        [s, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
            const Var& in = self.inputs[0];
            const Var& g = self.inputs[1];
            const Var& b = self.inputs[2];
            std::vector<float> dxh(m);
            for (int n = 0; n < s.n; ++n) {
                auto dy = self.grad.sample(n);
                auto xh = xhat.sample(n);
                for (int c = 0; c < s.c; ++c) {
                    double dg = 0.0;
                    double db = 0.0;
                    const float gc = g->value.data()[c];
                    for (std::size_t i = c * s.plane(); i < (c + 1) * s.plane(); ++i) {
                        dg += static_cast<double>(dy[i]) * xh[i];
                        db += dy[i];
                        dxh[i] = dy[i] * gc;
                    }
                    if (g->requires_grad) g->ensure_grad().data()[c] += static_cast<float>(dg);
                    if (b->requires_grad) b->ensure_grad().data()[c] += static_cast<float>(db);
                }
                if (!in->requires_grad) continue;
                double sum_dxh = 0.0;
                double sum_dxh_xh = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    sum_dxh += dxh[i];
                    sum_dxh_xh += static_cast<double>(dxh[i]) * xh[i];
                }
                const double mean_dxh = sum_dxh / static_cast<double>(m);
                const double mean_dxh_xh = sum_dxh_xh / static_cast<double>(m);
                auto dx = in->ensure_grad().sample(n);
                for (std::size_t i = 0; i < m; ++i) {
                    dx[i] += static_cast<float>(inv_std[n] *
                                                (dxh[i] - mean_dxh - xh[i] * mean_dxh_xh));
                }
            }
        });
}

Var concat_channels(std::initializer_list<Var> parts) {
    return concat_channels(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_channels(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    const Shape first = parts.front()->value.shape();
    int total_c = 0;
    for (const Var& v : parts) {
        const Shape s = v->value.shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w) {
            throw ShapeError("concat_channels: " + first.str() + " vs " + s.str());
        }
        total_c += s.c;
    }
    Tensor out(Shape{first.n, total_c, first.h, first.w});
    const std::size_t plane = first.plane();
    for (int n = 0; n < first.n; ++n) {
        float* dst = out.sample(n).data();
        for (const Var& v : parts) {
            auto src = v->value.sample(n);
            std::copy(src.begin(), src.end(), dst);
            dst += src.size();
        }
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return make_node(std::move(out), std::move(inputs), [plane](Node& self) {
        for (int n = 0; n < self.value.shape().n; ++n) {
            const float* src = self.grad.sample(n).data();
            for (const Var& v : self.inputs) {
                const std::size_t len = static_cast<std::size_t>(v->value.shape().c) * plane;
                if (v->requires_grad) {
                    float* dst = v->ensure_grad().sample(n).data();
                    for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                }
                src += len;
            }
        }
    });
}

Var concat_batch(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_batch: no inputs");
    const Shape first = parts.front()->value.shape();
    int total_n = 0;
    for (const Var& v : parts) {
        const Shape s = v->value.shape();
        if (s.c != first.c || s.h != first.h || s.w != first.w) {
            throw ShapeError("concat_batch: " + first.str() + " vs " + s.str());
        }
        total_n += s.n;
    }
    Tensor out(Shape{total_n, first.c, first.h, first.w});
    float* dst = out.data();
    for (const Var& v : parts) {
        std::copy(v->value.data(), v->value.data() + v->value.size(), dst);
        dst += v->value.size();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return make_node(std::move(out), std::move(inputs), [](Node& self) {
        const float* src = self.grad.data();
        for (const Var& v : self.inputs) {
            if (v->requires_grad) {
                float* d = v->ensure_grad().data();
                for (std::size_t i = 0; i < v->value.size(); ++i) d[i] += src[i];
            }
            src += v->value.size();
        }
    });
}

Var slice_channels(const Var& x, int begin, int count) {
    const Shape s = x->value.shape();
    if (begin < 0 || count <= 0 || begin + count > s.c) {
        throw ShapeError("slice_channels: range out of bounds for " + s.str());
    }
    Tensor out(Shape{s.n, count, s.h, s.w});
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
        const float* src = x->value.sample(n).data() + begin * plane;
        std::copy(src, src + count * plane, out.sample(n).data());
    }
    return make_node(std::move(out), {x}, [begin, count, plane](Node& self) {
        Tensor& g = self.inputs[0]->ensure_grad();
        for (int n = 0; n < self.value.shape().n; ++n) {
            float* dst = g.sample(n).data() + begin * plane;
            const float* src = self.grad.sample(n).data();
            for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
        }
    });
}

Var upsample_nearest2x(const Var& x) {
    const Shape s = x->value.shape();
    Tensor out(Shape{s.n, s.c, s.h * 2, s.w * 2});
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            for (int y = 0; y < 2 * s.h; ++y) {
                for (int xx = 0; xx < 2 * s.w; ++xx) {
                    out.at(n, c, y, xx) = x->value.at(n, c, y / 2, xx / 2);
                }
            }
        }
    }
    return make_node(std::move(out), {x}, [s](Node& self) {
        Tensor& g = self.inputs[0]->ensure_grad();
        for (int n = 0; n < s.n; ++n) {
            for (int c = 0; c < s.c; ++c) {
                for (int y = 0; y < 2 * s.h; ++y) {
                    for (int xx = 0; xx < 2 * s.w; ++xx) {
                        g.at(n, c, y / 2, xx / 2) += self.grad.at(n, c, y, xx);
                    }
                }
            }
        }
    });
}

Var lstm_cell(const Var& gates, const Var& c_prev) {
    const Shape gs = gates->value.shape();
    if (gs.c % 4 != 0) throw ShapeError("lstm_cell: gate channels must be a multiple of 4");
    const int hidden = gs.c / 4;
    const Shape cs{gs.n, hidden, gs.h, gs.w};
    if (c_prev && !(c_prev->value.shape() == cs)) {
        throw ShapeError("lstm_cell: cell state " + c_prev->value.shape().str() +
                         " does not match gates " + gs.str());
    }
    const std::size_t block = static_cast<std::size_t>(hidden) * gs.plane();
    Tensor out(Shape{gs.n, 2 * hidden, gs.h, gs.w});
    for (int n = 0; n < gs.n; ++n) {
        const float* g = gates->value.sample(n).data();
        const float* cp = c_prev ? c_prev->value.sample(n).data() : nullptr;
        float* h = out.sample(n).data();
        float* c = h + block;
        for (std::size_t i = 0; i < block; ++i) {
            const float ig = sigmoidf(g[i]);
            const float fg = sigmoidf(g[block + i]);
            const float og = sigmoidf(g[2 * block + i]);
            const float cand = std::tanh(g[3 * block + i]);
            c[i] = (cp ? fg * cp[i] : 0.0f) + ig * cand;
            h[i] = og * std::tanh(c[i]);
        }
    }
    return make_node(std::move(out), {gates, c_prev}, [block](Node& self) {
        const Var& gv = self.inputs[0];
        const Var& cv = self.inputs[1];
        const int batch = self.value.shape().n;
        for (int n = 0; n < batch; ++n) {
            const float* g = gv->value.sample(n).data();
            const float* cp = cv ? cv->value.sample(n).data() : nullptr;
            const float* c = self.value.sample(n).data() + block;
            const float* dh = self.grad.sample(n).data();
            const float* dc = dh + block;
            float* dg = gv->requires_grad ? gv->ensure_grad().sample(n).data() : nullptr;
            float* dcp = (cv && cv->requires_grad) ? cv->ensure_grad().sample(n).data() : nullptr;
            for (std::size_t i = 0; i < block; ++i) {
                const float ig = sigmoidf(g[i]);
                const float fg = sigmoidf(g[block + i]);
                const float og = sigmoidf(g[2 * block + i]);
                const float cand = std::tanh(g[3 * block + i]);
                const float tc = std::tanh(c[i]);
                const float dct = dc[i] + dh[i] * og * (1.0f - tc * tc);
                const float prev = cp ? cp[i] : 0.0f;
                if (dg) {
                    dg[i] += dct * cand * ig * (1.0f - ig);
                    dg[block + i] += dct * prev * fg * (1.0f - fg);
                    dg[2 * block + i] += dh[i] * tc * og * (1.0f - og);
                    dg[3 * block + i] += dct * ig * (1.0f - cand * cand);
                }
                if (dcp) dcp[i] += dct * fg;
            }
        }
    });
}

void backward(std::span<const std::pair<Var, Tensor>> seeds) {
    // Iterative post-order DFS gives a topological order (inputs before users).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    for (const auto& [node, grad] : seeds) {
        if (!node || !node->requires_grad) continue;
        check_same(node->value.shape(), grad.shape(), "backward seed");
        node->ensure_grad().add_inplace(grad);
        if (visited.insert(node.get()).second) stack.emplace_back(node.get(), 0);
        while (!stack.empty()) {
            auto& [cur, next] = stack.back();
            if (next < cur->inputs.size()) {
                Node* child = cur->inputs[next++].get();
                if (child && child->requires_grad && visited.insert(child).second) {
                    stack.emplace_back(child, 0);
                }
            } else {
                order.push_back(cur);
                stack.pop_back();
            }
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

}  // namespace tcupgan::nn
