#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "uapdet/tensor.hpp"

namespace uapdet {

using MatrixRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

enum class Op {
    leaf,
    conv2d,
    relu,
    maxpool2,
    dense,
    reshape,
    softmax_xent,
    add,
    sub,
    mul,
    scalar_mul,
    sum,
    spatial_mean,
    sub_rowvec,
    place_patch,
};

// One sampled patch placement: center in image pixels, rotation in radians,
// isotropic scale applied to the patch before placement.
struct PatchTransform {
    float cx = 0.0f;
    float cy = 0.0f;
    float angle = 0.0f;
    float scale = 1.0f;
};

namespace detail {

// Gathers one image into [C*KH*KW, Ho*Wo] patch columns. Out-of-range taps
// (padding) contribute zeros.
inline void im2col(const float* x, int64_t C, int64_t H, int64_t W, int64_t KH, int64_t KW,
                   int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, float* cols) {
    const int64_t col_w = Ho * Wo;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t kh = 0; kh < KH; ++kh) {
            for (int64_t kw = 0; kw < KW; ++kw) {
                float* row = cols + ((c * KH + kh) * KW + kw) * col_w;
                for (int64_t ho = 0; ho < Ho; ++ho) {
                    const int64_t h = ho * stride - pad + kh;
                    if (h < 0 || h >= H) {
                        for (int64_t wo = 0; wo < Wo; ++wo) row[ho * Wo + wo] = 0.0f;
                        continue;
                    }
                    const float* src = x + (c * H + h) * W;
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                        const int64_t w = wo * stride - pad + kw;
                        row[ho * Wo + wo] = (w >= 0 && w < W) ? src[w] : 0.0f;
                    }
                }
            }
        }
    }
}

// Scatter-adds patch columns back into an image gradient.
inline void col2im_add(const float* cols, int64_t C, int64_t H, int64_t W, int64_t KH, int64_t KW,
                       int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, float* dx) {
    const int64_t col_w = Ho * Wo;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t kh = 0; kh < KH; ++kh) {
            for (int64_t kw = 0; kw < KW; ++kw) {
                const float* row = cols + ((c * KH + kh) * KW + kw) * col_w;
                for (int64_t ho = 0; ho < Ho; ++ho) {
                    const int64_t h = ho * stride - pad + kh;
                    if (h < 0 || h >= H) continue;
                    float* dst = dx + (c * H + h) * W;
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                        const int64_t w = wo * stride - pad + kw;
                        if (w >= 0 && w < W) dst[w] += row[ho * Wo + wo];
                    }
                }
            }
        }
    }
}

// Maps an output pixel center back into patch pixel coordinates; returns
// false when the pixel is not covered by the placed patch (including the
// corners cut off by the circular mask).
inline bool patch_source_pixel(const PatchTransform& t, int64_t side, int64_t y, int64_t x,
                               int64_t& qy, int64_t& qx) {
    const float px = static_cast<float>(x) + 0.5f - t.cx;
    const float py = static_cast<float>(y) + 0.5f - t.cy;
    const float c = std::cos(t.angle), s = std::sin(t.angle);
    // inverse rotation then inverse scale
    const float ux = (c * px + s * py) / t.scale + static_cast<float>(side) * 0.5f;
    const float uy = (-s * px + c * py) / t.scale + static_cast<float>(side) * 0.5f;
    qx = static_cast<int64_t>(std::floor(ux));
    qy = static_cast<int64_t>(std::floor(uy));
    if (qx < 0 || qx >= side || qy < 0 || qy >= side) return false;
    const float half = static_cast<float>(side) * 0.5f;
    const float dx = static_cast<float>(qx) + 0.5f - half;
    const float dy = static_cast<float>(qy) + 0.5f - half;
    return dx * dx + dy * dy <= half * half;
}

}  // namespace detail

struct GraphNode {
    Op op = Op::leaf;
    std::vector<int> in;
    Tensor value;
    Tensor grad;
    bool needs_grad = true;  // leaves may opt out; propagated as OR over inputs

    // op parameters (used by the subset of ops that need them)
    int64_t stride = 1, pad = 0, window = 2;
    float scalar = 0.0f;
    std::vector<int> labels;                 // softmax_xent
    std::vector<int32_t> argmax;             // maxpool2
    Tensor aux;                              // conv2d: im2col; softmax_xent: probabilities
    Shape in_shape;                          // reshape
    std::vector<PatchTransform> transforms;  // place_patch
};

// Append-only operation tape. Node inputs always precede the node, so the
// reverse of the tape is a valid backward order. A graph built with
// training=false skips the saved-for-backward buffers and rejects backward().
class Graph {
public:
    explicit Graph(bool training = true) : training_(training) {}

    // A leaf with needs_grad=false never accumulates an adjoint (it stays
    // zero), which lets attack loops skip the parameter-gradient work.
    int leaf(Tensor v, bool needs_grad = true) {
        GraphNode n;
        n.op = Op::leaf;
        n.value = std::move(v);
        n.needs_grad = needs_grad;
        return push(std::move(n));
    }

    const Tensor& value(int id) const { return nodes_.at(static_cast<size_t>(id)).value; }
    const Tensor& grad(int id) const { return nodes_.at(static_cast<size_t>(id)).grad; }
    size_t size() const { return nodes_.size(); }

    // x: [N,C,H,W]; w: [F,C,KH,KW]; b: [F] node id or -1 for no bias.
    int conv2d(int x, int w, int b, int64_t stride = 1, int64_t pad = 0) {
        const Tensor& xv = value(x);
        const Tensor& wv = value(w);
        if (xv.rank() != 4 || wv.rank() != 4)
            throw ShapeError("conv2d: expected rank-4 input and kernel, got " +
                             shape_str(xv.shape()) + " and " + shape_str(wv.shape()));
        if (xv.dim(1) != wv.dim(1))
            throw ShapeError("conv2d: channel mismatch " + shape_str(xv.shape()) + " vs " +
                             shape_str(wv.shape()));
        if (stride < 1) throw ArgumentError("conv2d: stride must be >= 1");
        const int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        const int64_t F = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
        const int64_t Ho = conv_out_size(H, KH, stride, pad);
        const int64_t Wo = conv_out_size(W, KW, stride, pad);
        if (Ho <= 0 || Wo <= 0)
            throw ShapeError("conv2d: kernel " + shape_str(wv.shape()) + " does not fit input " +
                             shape_str(xv.shape()));
        const float* bias = nullptr;
        if (b >= 0) {
            const Tensor& bv = value(b);
            if (bv.numel() != F)
                throw ShapeError("conv2d: bias shape " + shape_str(bv.shape()) +
                                 " does not match filter count " + std::to_string(F));
            bias = bv.data();
        }

        GraphNode n;
        n.op = Op::conv2d;
        n.in = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
        n.stride = stride;
        n.pad = pad;
        n.value = Tensor({N, F, Ho, Wo});
        const int64_t cols_len = (C * KH * KW) * (Ho * Wo);
        if (training_)
            n.aux = Tensor({N, C * KH * KW, Ho * Wo});
        else if (static_cast<int64_t>(scratch_.size()) < cols_len)
            scratch_.resize(static_cast<size_t>(cols_len));

        ConstMapRM wm(wv.data(), F, C * KH * KW);
        for (int64_t i = 0; i < N; ++i) {
            float* cols = training_ ? n.aux.data() + i * cols_len : scratch_.data();
            detail::im2col(xv.data() + i * C * H * W, C, H, W, KH, KW, stride, pad, Ho, Wo, cols);
            MapRM out(n.value.data() + i * F * Ho * Wo, F, Ho * Wo);
            ConstMapRM cm(cols, C * KH * KW, Ho * Wo);
            out.noalias() = wm * cm;
            if (bias)
                for (int64_t f = 0; f < F; ++f) out.row(f).array() += bias[f];
        }
        require_finite(n.value, "conv2d");
        return push(std::move(n));
    }

    int relu(int x) {
        const Tensor& xv = value(x);
        GraphNode n;
        n.op = Op::relu;
        n.in = {x};
        n.value = Tensor(xv.shape());
        const float* src = xv.data();
        float* dst = n.value.data();
        for (int64_t i = 0; i < xv.numel(); ++i) dst[i] = src[i] > 0.0f ? src[i] : 0.0f;
        return push(std::move(n));
    }

    int maxpool2(int x, int64_t window = 2) {
        const Tensor& xv = value(x);
        if (xv.rank() != 4) throw ShapeError("maxpool2: expected rank-4 input, got " + shape_str(xv.shape()));
        if (window < 1) throw ArgumentError("maxpool2: window must be >= 1");
        const int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        if (H % window != 0 || W % window != 0)
            throw ShapeError("maxpool2: input " + shape_str(xv.shape()) + " not divisible by window " +
                             std::to_string(window));
        const int64_t Ho = H / window, Wo = W / window;
        GraphNode n;
        n.op = Op::maxpool2;
        n.in = {x};
        n.window = window;
        n.value = Tensor({N, C, Ho, Wo});
        n.argmax.resize(static_cast<size_t>(n.value.numel()));
        int64_t o = 0;
        for (int64_t i = 0; i < N; ++i) {
            for (int64_t c = 0; c < C; ++c) {
                const float* plane = xv.data() + (i * C + c) * H * W;
                for (int64_t ho = 0; ho < Ho; ++ho) {
                    for (int64_t wo = 0; wo < Wo; ++wo, ++o) {
                        int64_t best = (ho * window) * W + wo * window;
                        float bv = plane[best];
                        for (int64_t dh = 0; dh < window; ++dh) {
                            for (int64_t dw = 0; dw < window; ++dw) {
                                const int64_t idx = (ho * window + dh) * W + wo * window + dw;
                                if (plane[idx] > bv) {
                                    bv = plane[idx];
                                    best = idx;
                                }
                            }
                        }
                        n.value[o] = bv;
                        n.argmax[static_cast<size_t>(o)] = static_cast<int32_t>(best);
                    }
                }
            }
        }
        return push(std::move(n));
    }

    // x: [N,D]; w: [D,O]; b: [O] node id or -1.
    int dense(int x, int w, int b) {
        const Tensor& xv = value(x);
        const Tensor& wv = value(w);
        if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0))
            throw ShapeError("dense: incompatible shapes " + shape_str(xv.shape()) + " and " +
                             shape_str(wv.shape()));
        const int64_t N = xv.dim(0), D = xv.dim(1), O = wv.dim(1);
        GraphNode n;
        n.op = Op::dense;
        n.in = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
        n.value = Tensor({N, O});
        ConstMapRM xm(xv.data(), N, D);
        ConstMapRM wm(wv.data(), D, O);
        MapRM om(n.value.data(), N, O);
        om.noalias() = xm * wm;
        if (b >= 0) {
            const Tensor& bv = value(b);
            if (bv.numel() != O)
                throw ShapeError("dense: bias shape " + shape_str(bv.shape()) + " does not match " +
                                 std::to_string(O) + " outputs");
            for (int64_t i = 0; i < N; ++i)
                for (int64_t j = 0; j < O; ++j) n.value.at(i, j) += bv[j];
        }
        require_finite(n.value, "dense");
        return push(std::move(n));
    }

    int reshape(int x, Shape s) {
        const Tensor& xv = value(x);
        GraphNode n;
        n.op = Op::reshape;
        n.in = {x};
        n.in_shape = xv.shape();
        n.value = xv.reshaped(std::move(s));
        return push(std::move(n));
    }

    // Mean cross-entropy between softmax(logits) and integer labels.
    int softmax_xent(int logits, std::vector<int> labels) {
        const Tensor& lv = value(logits);
        if (lv.rank() != 2)
            throw ShapeError("softmax_xent: expected rank-2 logits, got " + shape_str(lv.shape()));
        const int64_t N = lv.dim(0), C = lv.dim(1);
        if (static_cast<int64_t>(labels.size()) != N)
            throw ShapeError("softmax_xent: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(N) + " rows");
        for (int y : labels)
            if (y < 0 || y >= C)
                throw ArgumentError("softmax_xent: label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(C) + ")");
        GraphNode n;
        n.op = Op::softmax_xent;
        n.in = {logits};
        n.labels = std::move(labels);
        n.aux = Tensor({N, C});  // probabilities
        float loss = 0.0f;
        for (int64_t i = 0; i < N; ++i) {
            const float* row = lv.data() + i * C;
            float mx = row[0];
            for (int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
            float denom = 0.0f;
            for (int64_t j = 0; j < C; ++j) denom += std::exp(row[j] - mx);
            const float log_denom = std::log(denom);
            for (int64_t j = 0; j < C; ++j)
                n.aux.at(i, j) = std::exp(row[j] - mx) / denom;
            loss += -(row[n.labels[static_cast<size_t>(i)]] - mx - log_denom);
        }
        n.value = Tensor::scalar(loss / static_cast<float>(N));
        require_finite(n.value, "softmax_xent");
        return push(std::move(n));
    }

    int add(int a, int b) { return binary(Op::add, a, b); }
    int sub(int a, int b) { return binary(Op::sub, a, b); }
    int mul(int a, int b) { return binary(Op::mul, a, b); }

    int scalar_mul(int a, float c) {
        const Tensor& av = value(a);
        GraphNode n;
        n.op = Op::scalar_mul;
        n.in = {a};
        n.scalar = c;
        n.value = Tensor(av.shape());
        for (int64_t i = 0; i < av.numel(); ++i) n.value[i] = av[i] * c;
        require_finite(n.value, "scalar_mul");
        return push(std::move(n));
    }

    int sum(int a) {
        const Tensor& av = value(a);
        GraphNode n;
        n.op = Op::sum;
        n.in = {a};
        float s = 0.0f;
        for (int64_t i = 0; i < av.numel(); ++i) s += av[i];
        n.value = Tensor::scalar(s);
        require_finite(n.value, "sum");
        return push(std::move(n));
    }

    // [N,C,H,W] -> [N,C] per-channel spatial mean; rank-2 input passes through.
    int spatial_mean(int a) {
        const Tensor& av = value(a);
        GraphNode n;
        n.op = Op::spatial_mean;
        n.in = {a};
        if (av.rank() == 2) {
            n.value = av;
        } else if (av.rank() == 4) {
            const int64_t N = av.dim(0), C = av.dim(1), HW = av.dim(2) * av.dim(3);
            n.value = Tensor({N, C});
            for (int64_t i = 0; i < N; ++i) {
                for (int64_t c = 0; c < C; ++c) {
                    const float* p = av.data() + (i * C + c) * HW;
                    float s = 0.0f;
                    for (int64_t k = 0; k < HW; ++k) s += p[k];
                    n.value.at(i, c) = s / static_cast<float>(HW);
                }
            }
        } else {
            throw ShapeError("spatial_mean: expected rank-2 or rank-4 input, got " + shape_str(av.shape()));
        }
        return push(std::move(n));
    }

    // [N,C] - [C] broadcast across rows.
    int sub_rowvec(int a, int v) {
        const Tensor& av = value(a);
        const Tensor& vv = value(v);
        if (av.rank() != 2 || vv.numel() != av.dim(1))
            throw ShapeError("sub_rowvec: shapes " + shape_str(av.shape()) + " and " +
                             shape_str(vv.shape()) + " are incompatible");
        GraphNode n;
        n.op = Op::sub_rowvec;
        n.in = {a, v};
        n.value = Tensor(av.shape());
        for (int64_t i = 0; i < av.dim(0); ++i)
            for (int64_t j = 0; j < av.dim(1); ++j) n.value.at(i, j) = av.at(i, j) - vv[j];
        return push(std::move(n));
    }

    // Renders a patch into each image with a per-image transform; covered
    // pixels are replaced, so gradients flow only into the patch.
    int place_patch(int x, int patch, std::vector<PatchTransform> transforms) {
        const Tensor& xv = value(x);
        const Tensor& pv = value(patch);
        if (xv.rank() != 4 || pv.rank() != 3 || pv.dim(0) != xv.dim(1) || pv.dim(1) != pv.dim(2))
            throw ShapeError("place_patch: image " + shape_str(xv.shape()) + " and patch " +
                             shape_str(pv.shape()) + " are incompatible");
        if (static_cast<int64_t>(transforms.size()) != xv.dim(0))
            throw ArgumentError("place_patch: " + std::to_string(transforms.size()) +
                                " transforms for batch of " + std::to_string(xv.dim(0)));
        const int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        const int64_t S = pv.dim(1);
        GraphNode n;
        n.op = Op::place_patch;
        n.in = {x, patch};
        n.transforms = std::move(transforms);
        n.value = xv;
        for (int64_t i = 0; i < N; ++i) {
            const PatchTransform& t = n.transforms[static_cast<size_t>(i)];
            int64_t qy, qx;
            for (int64_t y = 0; y < H; ++y) {
                for (int64_t x2 = 0; x2 < W; ++x2) {
                    if (!detail::patch_source_pixel(t, S, y, x2, qy, qx)) continue;
                    for (int64_t c = 0; c < C; ++c)
                        n.value.at(i, c, y, x2) = pv.data()[(c * S + qy) * S + qx];
                }
            }
        }
        return push(std::move(n));
    }

    // Reverse-mode sweep from a scalar root. Fills `grad` on every node the
    // root depends on; adjoint shapes match value shapes.
    void backward(int root) {
        if (!training_)
            throw ArgumentError("backward: graph was built in inference mode");
        if (value(root).numel() != 1)
            throw ArgumentError("backward: root must be scalar, got shape " +
                                shape_str(value(root).shape()));
        std::vector<char> reach(nodes_.size(), 0);
        mark_reachable(root, reach);
        for (size_t i = 0; i < nodes_.size(); ++i) {
            if (reach[i])
                nodes_[i].grad = Tensor(nodes_[i].value.shape());
            else
                nodes_[i].grad = Tensor();
        }
        nodes_[static_cast<size_t>(root)].grad[0] = 1.0f;

        for (int id = root; id >= 0; --id) {
            if (!reach[static_cast<size_t>(id)]) continue;
            if (!nodes_[static_cast<size_t>(id)].needs_grad) continue;  // adjoint is identically zero
            backward_node(id);
        }
    }

private:
    std::vector<GraphNode> nodes_;
    bool training_ = true;
    std::vector<float> scratch_;  // inference-mode im2col buffer, reused across nodes

    int push(GraphNode n) {
        if (n.op != Op::leaf) {
            n.needs_grad = false;
            for (int in : n.in) n.needs_grad |= nodes_[static_cast<size_t>(in)].needs_grad;
        }
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    bool needs(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    int binary(Op op, int a, int b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        const char* name = op == Op::add ? "add" : op == Op::sub ? "sub" : "mul";
        require_same_shape(av, bv, name);
        GraphNode n;
        n.op = op;
        n.in = {a, b};
        n.value = Tensor(av.shape());
        for (int64_t i = 0; i < av.numel(); ++i) {
            switch (op) {
                case Op::add: n.value[i] = av[i] + bv[i]; break;
                case Op::sub: n.value[i] = av[i] - bv[i]; break;
                default: n.value[i] = av[i] * bv[i]; break;
            }
        }
        require_finite(n.value, name);
        return push(std::move(n));
    }

    void mark_reachable(int root, std::vector<char>& reach) const {
        std::vector<int> stack = {root};
        while (!stack.empty()) {
            const int id = stack.back();
            stack.pop_back();
            if (reach[static_cast<size_t>(id)]) continue;
            reach[static_cast<size_t>(id)] = 1;
            for (int in : nodes_[static_cast<size_t>(id)].in) stack.push_back(in);
        }
    }

    void backward_node(int id) {
        GraphNode& n = nodes_[static_cast<size_t>(id)];
        const Tensor& g = n.grad;
        switch (n.op) {
            case Op::leaf:
                break;
            case Op::conv2d: {
                const Tensor& xv = value(n.in[0]);
                const Tensor& wv = value(n.in[1]);
                const bool want_dx = needs(n.in[0]);
                const bool want_dw = needs(n.in[1]);
                Tensor& dx = nodes_[static_cast<size_t>(n.in[0])].grad;
                Tensor& dw = nodes_[static_cast<size_t>(n.in[1])].grad;
                const int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
                const int64_t F = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
                const int64_t Ho = n.value.dim(2), Wo = n.value.dim(3);
                ConstMapRM wm(wv.data(), F, C * KH * KW);
                MapRM dwm(dw.data(), want_dw ? F : 0, want_dw ? C * KH * KW : 0);
                Tensor dcols = want_dx ? Tensor({C * KH * KW, Ho * Wo}) : Tensor();
                for (int64_t i = 0; i < N; ++i) {
                    ConstMapRM gm(g.data() + i * F * Ho * Wo, F, Ho * Wo);
                    if (want_dw) {
                        ConstMapRM cm(n.aux.data() + i * (C * KH * KW) * (Ho * Wo), C * KH * KW, Ho * Wo);
                        dwm.noalias() += gm * cm.transpose();
                    }
                    if (want_dx) {
                        MapRM dcm(dcols.data(), C * KH * KW, Ho * Wo);
                        dcm.noalias() = wm.transpose() * gm;
                        detail::col2im_add(dcols.data(), C, H, W, KH, KW, n.stride, n.pad, Ho, Wo,
                                           dx.data() + i * C * H * W);
                    }
                }
                if (n.in.size() == 3 && needs(n.in[2])) {
                    Tensor& db = nodes_[static_cast<size_t>(n.in[2])].grad;
                    for (int64_t i = 0; i < N; ++i)
                        for (int64_t f = 0; f < F; ++f) {
                            const float* gp = g.data() + (i * F + f) * Ho * Wo;
                            float s = 0.0f;
                            for (int64_t k = 0; k < Ho * Wo; ++k) s += gp[k];
                            db[f] += s;
                        }
                }
                break;
            }
            case Op::relu: {
                if (!needs(n.in[0])) break;
                const Tensor& xv = value(n.in[0]);
                Tensor& dx = nodes_[static_cast<size_t>(n.in[0])].grad;
                for (int64_t i = 0; i < xv.numel(); ++i)
                    if (xv[i] > 0.0f) dx[i] += g[i];
                break;
            }
            case Op::maxpool2: {
                if (!needs(n.in[0])) break;
                Tensor& dx = nodes_[static_cast<size_t>(n.in[0])].grad;
                const Tensor& xv = value(n.in[0]);
                const int64_t HW = xv.dim(2) * xv.dim(3);
                const int64_t planes = n.value.dim(0) * n.value.dim(1);
                const int64_t out_hw = n.value.dim(2) * n.value.dim(3);
                for (int64_t p = 0; p < planes; ++p)
                    for (int64_t k = 0; k < out_hw; ++k)
                        dx[p * HW + n.argmax[static_cast<size_t>(p * out_hw + k)]] += g[p * out_hw + k];
                break;
            }
            case Op::dense: {
                const Tensor& xv = value(n.in[0]);
                const Tensor& wv = value(n.in[1]);
                const int64_t N = xv.dim(0), D = xv.dim(1), O = wv.dim(1);
                ConstMapRM xm(xv.data(), N, D);
                ConstMapRM wm(wv.data(), D, O);
                ConstMapRM gm(g.data(), N, O);
                if (needs(n.in[0])) {
                    MapRM dxm(nodes_[static_cast<size_t>(n.in[0])].grad.data(), N, D);
                    dxm.noalias() += gm * wm.transpose();
                }
                if (needs(n.in[1])) {
                    MapRM dwm(nodes_[static_cast<size_t>(n.in[1])].grad.data(), D, O);
                    dwm.noalias() += xm.transpose() * gm;
                }
                if (n.in.size() == 3 && needs(n.in[2])) {
                    Tensor& db = nodes_[static_cast<size_t>(n.in[2])].grad;
                    for (int64_t i = 0; i < N; ++i)
                        for (int64_t j = 0; j < O; ++j) db[j] += g.at(i, j);
                }
                break;
            }
            case Op::reshape: {
                if (!needs(n.in[0])) break;
                Tensor& dx = nodes_[static_cast<size_t>(n.in[0])].grad;
                for (int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
                break;
            }
            case Op::softmax_xent: {
                if (!needs(n.in[0])) break;
                Tensor& dl = nodes_[static_cast<size_t>(n.in[0])].grad;
                const int64_t N = n.aux.dim(0), C = n.aux.dim(1);
                const float scale = g[0] / static_cast<float>(N);
                for (int64_t i = 0; i < N; ++i)
                    for (int64_t j = 0; j < C; ++j) {
                        const float onehot = (j == n.labels[static_cast<size_t>(i)]) ? 1.0f : 0.0f;
                        dl.at(i, j) += scale * (n.aux.at(i, j) - onehot);
                    }
                break;
            }
            case Op::add: {
                Tensor& da = nodes_[static_cast<size_t>(n.in[0])].grad;
                Tensor& db = nodes_[static_cast<size_t>(n.in[1])].grad;
                const bool wa = needs(n.in[0]), wb = needs(n.in[1]);
                for (int64_t i = 0; i < g.numel(); ++i) {
                    if (wa) da[i] += g[i];
                    if (wb) db[i] += g[i];
                }
                break;
            }
            case Op::sub: {
                Tensor& da = nodes_[static_cast<size_t>(n.in[0])].grad;
                Tensor& db = nodes_[static_cast<size_t>(n.in[1])].grad;
                const bool wa = needs(n.in[0]), wb = needs(n.in[1]);
                for (int64_t i = 0; i < g.numel(); ++i) {
                    if (wa) da[i] += g[i];
                    if (wb) db[i] -= g[i];
                }
                break;
            }
            case Op::mul: {
                const Tensor& av = value(n.in[0]);
                const Tensor& bv = value(n.in[1]);
                Tensor& da = nodes_[static_cast<size_t>(n.in[0])].grad;
                Tensor& db = nodes_[static_cast<size_t>(n.in[1])].grad;
                const bool wa = needs(n.in[0]), wb = needs(n.in[1]);
                for (int64_t i = 0; i < g.numel(); ++i) {
                    if (wa) da[i] += g[i] * bv[i];
                    if (wb) db[i] += g[i] * av[i];
                }
                break;
            }
            case Op::scalar_mul: {
                if (!needs(n.in[0])) break;
                Tensor& da = nodes_[static_cast<size_t>(n.in[0])].grad;
                for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * n.scalar;
                break;
            }
            case Op::sum: {
                if (!needs(n.in[0])) break;
                Tensor& da = nodes_[static_cast<size_t>(n.in[0])].grad;
                for (int64_t i = 0; i < da.numel(); ++i) da[i] += g[0];
                break;
            }
            case Op::spatial_mean: {
                if (!needs(n.in[0])) break;
                const Tensor& xv = value(n.in[0]);
                Tensor& dx = nodes_[static_cast<size_t>(n.in[0])].grad;
                if (xv.rank() == 2) {
                    for (int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
                } else {
                    const int64_t NC = xv.dim(0) * xv.dim(1), HW = xv.dim(2) * xv.dim(3);
                    const float inv = 1.0f / static_cast<float>(HW);
                    for (int64_t p = 0; p < NC; ++p)
                        for (int64_t k = 0; k < HW; ++k) dx[p * HW + k] += g[p] * inv;
                }
                break;
            }
            case Op::sub_rowvec: {
                Tensor& da = nodes_[static_cast<size_t>(n.in[0])].grad;
                Tensor& dv = nodes_[static_cast<size_t>(n.in[1])].grad;
                const bool wa = needs(n.in[0]), wv2 = needs(n.in[1]);
                const int64_t N = n.value.dim(0), C = n.value.dim(1);
                for (int64_t i = 0; i < N; ++i)
                    for (int64_t j = 0; j < C; ++j) {
                        if (wa) da.at(i, j) += g.at(i, j);
                        if (wv2) dv[j] -= g.at(i, j);
                    }
                break;
            }
            case Op::place_patch: {
                const Tensor& xv = value(n.in[0]);
                const Tensor& pv = value(n.in[1]);
                const bool want_dx = needs(n.in[0]);
                const bool want_dp = needs(n.in[1]);
                Tensor& dx = nodes_[static_cast<size_t>(n.in[0])].grad;
                Tensor& dp = nodes_[static_cast<size_t>(n.in[1])].grad;
                const int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
                const int64_t S = pv.dim(1);
                for (int64_t i = 0; i < N; ++i) {
                    const PatchTransform& t = n.transforms[static_cast<size_t>(i)];
                    int64_t qy, qx;
                    for (int64_t y = 0; y < H; ++y) {
                        for (int64_t x2 = 0; x2 < W; ++x2) {
                            const bool covered = detail::patch_source_pixel(t, S, y, x2, qy, qx);
                            for (int64_t c = 0; c < C; ++c) {
                                const float gv = g.at(i, c, y, x2);
                                if (covered) {
                                    if (want_dp) dp[(c * S + qy) * S + qx] += gv;
                                } else if (want_dx) {
                                    dx.at(i, c, y, x2) += gv;
                                }
                            }
                        }
                    }
                }
                break;
            }
        }
    }
};

// Numerically stable row-wise softmax, for inference paths that do not need a
// loss node.
inline Tensor softmax_rows(const Tensor& logits) {
    if (logits.rank() != 2)
        throw ShapeError("softmax_rows: expected rank-2 logits, got " + shape_str(logits.shape()));
    const int64_t N = logits.dim(0), C = logits.dim(1);
    Tensor out({N, C});
    for (int64_t i = 0; i < N; ++i) {
        const float* row = logits.data() + i * C;
        float mx = row[0];
        for (int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
        float denom = 0.0f;
        for (int64_t j = 0; j < C; ++j) denom += std::exp(row[j] - mx);
        for (int64_t j = 0; j < C; ++j) out.at(i, j) = std::exp(row[j] - mx) / denom;
    }
    return out;
}

}  // namespace uapdet
