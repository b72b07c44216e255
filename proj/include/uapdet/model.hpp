#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "uapdet/autodiff.hpp"
#include "uapdet/data.hpp"
#include "uapdet/io.hpp"
#include "uapdet/rng.hpp"
#include "uapdet/tensor.hpp"

namespace uapdet {

struct Hyperparams {
    float lr = 0.01f;
    float momentum = 0.9f;
    int epochs = 5;
    int batch_size = 64;
    uint64_t seed = 1;
};

struct TrainMeta {
    uint64_t seed = 0;
    int epochs = 0;
    float final_accuracy = 0.0f;
};

inline const std::vector<std::string>& tap_names() {
    static const std::vector<std::string> names = {"1.0", "1.1", "2.0", "2.1", "3.0"};
    return names;
}

// conv(32,3x3)-relu-conv(32,3x3)-relu-pool2-conv(64,3x3)-relu-conv(64,3x3)-relu-pool2-
// dense(256)-relu-dense(num_classes), with activation taps after every relu.
class SmallCnn {
public:
    SmallCnn(Shape input_chw, int num_classes, uint64_t init_seed = 1)
        : input_chw_(std::move(input_chw)), num_classes_(num_classes) {
        if (input_chw_.size() != 3)
            throw ArgumentError("SmallCnn: input shape must be CxHxW, got " + shape_str(input_chw_));
        if (num_classes_ < 2) throw ArgumentError("SmallCnn: need at least 2 classes");
        const int64_t C = input_chw_[0], H = input_chw_[1], W = input_chw_[2];
        const int64_t h1 = H - 4, w1 = W - 4;  // two valid 3x3 convs
        if (h1 <= 0 || w1 <= 0 || h1 % 2 || w1 % 2)
            throw ArgumentError("SmallCnn: input " + shape_str(input_chw_) + " too small for the architecture");
        const int64_t h2 = h1 / 2 - 4, w2 = w1 / 2 - 4;
        if (h2 <= 0 || w2 <= 0 || h2 % 2 || w2 % 2)
            throw ArgumentError("SmallCnn: input " + shape_str(input_chw_) + " too small for the architecture");
        flat_h_ = h2 / 2;
        flat_w_ = w2 / 2;

        add_param("conv1.weight", {32, C, 3, 3});
        add_param("conv1.bias", {32});
        add_param("conv2.weight", {32, 32, 3, 3});
        add_param("conv2.bias", {32});
        add_param("conv3.weight", {64, 32, 3, 3});
        add_param("conv3.bias", {64});
        add_param("conv4.weight", {64, 64, 3, 3});
        add_param("conv4.bias", {64});
        add_param("fc1.weight", {64 * flat_h_ * flat_w_, 256});
        add_param("fc1.bias", {256});
        add_param("fc2.weight", {256, num_classes_});
        add_param("fc2.bias", {num_classes_});
        init_parameters(init_seed);
    }

    const Shape& input_chw() const { return input_chw_; }
    int num_classes() const { return num_classes_; }

    std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }

    Tensor& param(const std::string& name) {
        for (auto& [k, v] : params_)
            if (k == name) return v;
        throw ArgumentError("SmallCnn: unknown parameter " + name);
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& [k, v] : params_) n += v.numel();
        return n;
    }

    std::string arch_string() const {
        std::ostringstream os;
        os << "in=" << input_chw_[0] << "x" << input_chw_[1] << "x" << input_chw_[2]
           << ";conv32k3,relu#1.0,conv32k3,relu#1.1,pool2,conv64k3,relu#2.0,conv64k3,relu#2.1,pool2,"
           << "dense256,relu#3.0,dense" << num_classes_;
        return os.str();
    }

    // Parses the canonical architecture string back into (input shape, classes).
    static std::pair<Shape, int> parse_arch_string(const std::string& arch) {
        Shape chw(3);
        int classes = 0;
        char xc;
        std::istringstream is(arch);
        std::string head;
        if (!std::getline(is, head, ';')) throw FormatError("bad architecture string: " + arch);
        std::istringstream hs(head.substr(3));
        if (head.rfind("in=", 0) != 0 || !(hs >> chw[0] >> xc >> chw[1] >> xc >> chw[2]))
            throw FormatError("bad architecture string: " + arch);
        const auto pos = arch.rfind("dense");
        classes = std::stoi(arch.substr(pos + 5));
        return {chw, classes};
    }

    struct ForwardNodes {
        int input = -1;
        int logits = -1;
        std::map<std::string, int> taps;
    };

    // Builds the forward graph from an existing input node; parameters enter
    // the graph as leaves so callers can read their adjoints after backward.
    // Builds the forward graph. Attack loops pass track_param_grads=false so
    // backward skips the parameter-gradient work they never read.
    ForwardNodes forward(Graph& g, int input, bool track_param_grads = true) const {
        // Note: graph node pushes invalidate references into the graph, so the
        // batch size is captured before any node is added.
        const int64_t batch = check_input(g, input);
        auto p = [&](const char* name) { return g.leaf(find(name), track_param_grads); };
        return forward_impl(g, input, batch, p);
    }

    // Forward pass with parameter leaves tracked by name, for training steps.
    ForwardNodes forward_trainable(Graph& g, int input, std::map<std::string, int>& param_nodes) const {
        const int64_t batch = check_input(g, input);
        for (const auto& [name, value] : params_) param_nodes[name] = g.leaf(value);
        auto p = [&](const char* name) { return param_nodes.at(name); };
        return forward_impl(g, input, batch, p);
    }

private:
    Shape input_chw_;
    int num_classes_;
    int64_t flat_h_ = 0, flat_w_ = 0;
    std::vector<std::pair<std::string, Tensor>> params_;

    void add_param(const std::string& name, Shape shape) { params_.emplace_back(name, Tensor(std::move(shape))); }

    int64_t check_input(const Graph& g, int input) const {
        const Tensor& x = g.value(input);
        if (x.rank() != 4 || x.dim(1) != input_chw_[0] || x.dim(2) != input_chw_[1] ||
            x.dim(3) != input_chw_[2])
            throw ShapeError("SmallCnn: input " + shape_str(x.shape()) + " does not match model input " +
                             shape_str(input_chw_));
        return x.dim(0);
    }

    template <typename ParamFn>
    ForwardNodes forward_impl(Graph& g, int input, int64_t batch, ParamFn&& p) const {
        ForwardNodes out;
        out.input = input;
        const int r1 = g.relu(g.conv2d(input, p("conv1.weight"), p("conv1.bias")));
        out.taps["1.0"] = r1;
        const int r2 = g.relu(g.conv2d(r1, p("conv2.weight"), p("conv2.bias")));
        out.taps["1.1"] = r2;
        const int p1 = g.maxpool2(r2);
        const int r3 = g.relu(g.conv2d(p1, p("conv3.weight"), p("conv3.bias")));
        out.taps["2.0"] = r3;
        const int r4 = g.relu(g.conv2d(r3, p("conv4.weight"), p("conv4.bias")));
        out.taps["2.1"] = r4;
        const int p2 = g.maxpool2(r4);
        const int flat = g.reshape(p2, {batch, 64 * flat_h_ * flat_w_});
        const int r5 = g.relu(g.dense(flat, p("fc1.weight"), p("fc1.bias")));
        out.taps["3.0"] = r5;
        out.logits = g.dense(r5, p("fc2.weight"), p("fc2.bias"));
        return out;
    }

    const Tensor& find(const char* name) const {
        for (const auto& [k, v] : params_)
            if (k == name) return v;
        throw ArgumentError("SmallCnn: unknown parameter " + std::string(name));
    }

    void init_parameters(uint64_t seed) {
        Rng rng(seed ^ 0x1417afadeULL);
        for (auto& [name, t] : params_) {
            if (name.find(".bias") != std::string::npos) continue;  // biases start at zero
            int64_t fan_in;
            if (t.rank() == 4)
                fan_in = t.dim(1) * t.dim(2) * t.dim(3);
            else
                fan_in = t.dim(0);
            const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = stddev * rng.normal();
        }
    }
};

struct PredictResult {
    Tensor probabilities;     // [N, num_classes], rows sum to 1
    std::vector<int> labels;  // argmax, lowest index wins ties
    std::map<std::string, Tensor> taps;
};

inline int argmax_row(const float* row, int64_t n) {
    int best = 0;
    for (int64_t j = 1; j < n; ++j)
        if (row[j] > row[best]) best = static_cast<int>(j);
    return best;
}

// Single forward pass over one batch; collects the requested activation taps
// from the same pass that produces the predictions.
inline PredictResult predict_batch(const SmallCnn& model, const Tensor& images,
                                   const std::vector<std::string>& want_taps = {}) {
    Graph g(/*training=*/false);
    const int input = g.leaf(images);
    const auto fwd = model.forward(g, input);
    PredictResult out;
    out.probabilities = softmax_rows(g.value(fwd.logits));
    const int64_t N = out.probabilities.dim(0), C = out.probabilities.dim(1);
    out.labels.resize(static_cast<size_t>(N));
    for (int64_t i = 0; i < N; ++i)
        out.labels[static_cast<size_t>(i)] = argmax_row(out.probabilities.data() + i * C, C);
    for (const auto& k : want_taps) {
        auto it = fwd.taps.find(k);
        if (it == fwd.taps.end()) throw ArgumentError("unknown activation tap: " + k);
        out.taps[k] = g.value(it->second);
    }
    return out;
}

inline int default_eval_threads() {
    const char* env = std::getenv("UAPDET_THREADS");
    if (env) return std::max(1, std::atoi(env));
    return std::max(1u, std::thread::hardware_concurrency());
}

// Chunked parallel map over a batch dimension. Chunks are fixed-size so the
// result layout (and therefore every downstream metric) is independent of the
// thread count.
inline void for_each_chunk(int64_t n, int64_t chunk, const std::function<void(int64_t, int64_t)>& fn,
                           int threads = default_eval_threads()) {
    if (threads <= 1 || n <= chunk) {
        for (int64_t b = 0; b < n; b += chunk) fn(b, std::min(n, b + chunk));
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int64_t> next{0};
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&]() {
            for (;;) {
                const int64_t b = next.fetch_add(chunk);
                if (b >= n) return;
                fn(b, std::min(n, b + chunk));
            }
        });
    }
    for (auto& th : pool) th.join();
}

// Whole-set prediction, chunked (and optionally threaded) over the batch.
inline PredictResult predict(const SmallCnn& model, const ImageBatch& batch,
                             const std::vector<std::string>& want_taps = {},
                             int threads = default_eval_threads()) {
    const int64_t n = batch.size();
    constexpr int64_t kChunk = 64;
    PredictResult out;
    out.probabilities = Tensor({n, model.num_classes()});
    out.labels.resize(static_cast<size_t>(n));
    // preallocate tap outputs using a one-image probe
    std::map<std::string, int64_t> tap_width;
    if (!want_taps.empty()) {
        PredictResult probe = predict_batch(model, batch.slice(0, std::min<int64_t>(1, n)).images, want_taps);
        for (const auto& [k, t] : probe.taps) {
            Shape s = t.shape();
            s[0] = n;
            tap_width[k] = t.numel();
            out.taps[k] = Tensor(s);
        }
    }
    for_each_chunk(
        n, kChunk,
        [&](int64_t b, int64_t e) {
            PredictResult r = predict_batch(model, batch.slice(b, e).images, want_taps);
            std::copy_n(r.probabilities.data(), r.probabilities.numel(),
                        out.probabilities.data() + b * model.num_classes());
            std::copy_n(r.labels.begin(), r.labels.size(), out.labels.begin() + b);
            for (auto& [k, t] : r.taps)
                std::copy_n(t.data(), t.numel(), out.taps[k].data() + b * tap_width[k]);
        },
        threads);
    return out;
}

// Activation tensor at a named tap, batch x a_k x a_k x d_k view of the layer
// output (dense taps come back as [N, d]).
inline Tensor tap_activations(const SmallCnn& model, const ImageBatch& batch, const std::string& k,
                              int threads = default_eval_threads()) {
    return predict(model, batch, {k}, threads).taps.at(k);
}

inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
    if (predicted.size() != truth.size() || predicted.empty())
        throw ArgumentError("accuracy: size mismatch or empty");
    int64_t ok = 0;
    for (size_t i = 0; i < predicted.size(); ++i) ok += predicted[i] == truth[i];
    return static_cast<double>(ok) / static_cast<double>(predicted.size());
}

struct Checkpoint {
    uint16_t version = 1;
    std::string arch;
    std::vector<std::pair<std::string, Tensor>> params;
    TrainMeta meta;
};

inline Checkpoint checkpoint_of(const SmallCnn& model, TrainMeta meta) {
    Checkpoint ck;
    ck.arch = model.arch_string();
    ck.params = model.params();
    ck.meta = meta;
    return ck;
}

inline SmallCnn model_from_checkpoint(const Checkpoint& ck) {
    auto [chw, classes] = SmallCnn::parse_arch_string(ck.arch);
    SmallCnn model(chw, classes, /*init_seed=*/ck.meta.seed);
    if (ck.params.size() != model.params().size())
        throw FormatError("checkpoint has " + std::to_string(ck.params.size()) + " parameters, expected " +
                          std::to_string(model.params().size()));
    for (size_t i = 0; i < ck.params.size(); ++i) {
        auto& [name, value] = model.params()[i];
        if (ck.params[i].first != name)
            throw FormatError("checkpoint parameter " + ck.params[i].first + " where " + name + " expected");
        if (ck.params[i].second.shape() != value.shape())
            throw FormatError("checkpoint parameter " + name + " has shape " +
                              shape_str(ck.params[i].second.shape()) + ", expected " + shape_str(value.shape()));
        value = ck.params[i].second;
    }
    return model;
}

// Checkpoint file: "UAPS", version u16, architecture string, parameters
// (name, shape, little-endian f32 data), then a training-metadata trailer.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    ByteWriter w;
    w.raw("UAPS", 4);
    w.u16(ck.version);
    w.str(ck.arch);
    w.u32(static_cast<uint32_t>(ck.params.size()));
    for (const auto& [name, t] : ck.params) {
        w.str(name);
        w.tensor(t);
    }
    w.u64(ck.meta.seed);
    w.u32(static_cast<uint32_t>(ck.meta.epochs));
    w.f32(ck.meta.final_accuracy);
    write_file_bytes(path, w.bytes());
}

inline Checkpoint load_checkpoint(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    ByteReader r(bytes, path);
    r.expect_magic("UAPS");
    Checkpoint ck;
    ck.version = r.u16();
    if (ck.version != 1) r.fail("unsupported checkpoint version " + std::to_string(ck.version));
    ck.arch = r.str();
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        Tensor t = r.tensor();
        ck.params.emplace_back(std::move(name), std::move(t));
    }
    ck.meta.seed = r.u64();
    ck.meta.epochs = static_cast<int>(r.u32());
    ck.meta.final_accuracy = r.f32();
    return ck;
}

using EpochLogger = std::function<void(int epoch, double mean_loss, double val_accuracy)>;

inline EpochLogger stdout_logger() {
    return [](int epoch, double loss, double acc) {
        std::cout << "epoch " << epoch << ": mean loss " << loss << ", validation accuracy " << acc
                  << std::endl;
    };
}

// Plain SGD with momentum. Deterministic for a fixed seed within a build:
// initialization and batch order come from the seeded generator and
// evaluation order is fixed.
inline Checkpoint train(const ImageBatch& train_set, const ImageBatch& val_set, const Hyperparams& hp,
                        const EpochLogger& log = stdout_logger()) {
    if (train_set.size() == 0) throw ArgumentError("train: empty training set");
    if (hp.batch_size <= 0 || hp.epochs < 0) throw ArgumentError("train: bad hyperparameters");
    const Shape chw = {train_set.images.dim(1), train_set.images.dim(2), train_set.images.dim(3)};
    SmallCnn model(chw, train_set.num_classes, hp.seed);

    std::vector<Tensor> velocity;
    for (auto& [name, t] : model.params()) velocity.emplace_back(t.shape());

    Rng order_rng(hp.seed ^ 0x0bdead5eedULL);
    std::vector<int64_t> idx(static_cast<size_t>(train_set.size()));
    for (int64_t i = 0; i < train_set.size(); ++i) idx[static_cast<size_t>(i)] = i;

    double val_acc = 0.0;
    for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
        order_rng.shuffle(idx);
        double loss_sum = 0.0;
        int64_t steps = 0;
        for (int64_t b = 0; b < train_set.size(); b += hp.batch_size) {
            const int64_t e = std::min<int64_t>(train_set.size(), b + hp.batch_size);
            std::vector<int64_t> batch_idx(idx.begin() + b, idx.begin() + e);
            ImageBatch mb = train_set.select(batch_idx);

            Graph g;
            const int input = g.leaf(mb.images);
            std::map<std::string, int> param_nodes;
            int loss;
            try {
                const auto fwd = model.forward_trainable(g, input, param_nodes);
                loss = g.softmax_xent(fwd.logits, mb.labels);
            } catch (const NumericError& err) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(steps) + ": " + err.what());
            }
            loss_sum += g.value(loss)[0];
            ++steps;
            g.backward(loss);

            size_t pi = 0;
            for (auto& [name, t] : model.params()) {
                const Tensor& grad = g.grad(param_nodes.at(name));
                Tensor& v = velocity[pi++];
                for (int64_t i = 0; i < t.numel(); ++i) {
                    v[i] = hp.momentum * v[i] + grad[i];
                    t[i] -= hp.lr * v[i];
                }
            }
        }
        if (val_set.size() > 0) {
            PredictResult pr = predict(model, val_set);
            val_acc = accuracy(pr.labels, val_set.labels);
        }
        if (log) log(epoch, loss_sum / static_cast<double>(std::max<int64_t>(1, steps)), val_acc);
    }
    if (hp.epochs == 0 && val_set.size() > 0) {
        PredictResult pr = predict(model, val_set);
        val_acc = accuracy(pr.labels, val_set.labels);
    }
    TrainMeta meta{hp.seed, hp.epochs, static_cast<float>(val_acc)};
    return checkpoint_of(model, meta);
}

}  // namespace uapdet
