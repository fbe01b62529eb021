#pragma once

// Frozen-feature evaluation: deterministic feature extraction, weighted-vote
// kNN classification, a linear probe, and the feature export format.
//
// The backbone under evaluation is frozen; by convention the teacher branch
// provides the features (the student can be passed for diagnostics). Images
// see no augmentation beyond a full-frame bilinear resize to the global crop
// size plus normalization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mugs/augment.hpp"
#include "mugs/dataset.hpp"
#include "mugs/io.hpp"
#include "mugs/model.hpp"
#include "mugs/optim.hpp"
#include "mugs/rng.hpp"
#include "mugs/tensor.hpp"

namespace mugs {

constexpr uint32_t kFeatureVersion = 1;

struct FeatureBank {
    Tensor features;  // [n x d], raw class tokens (kNN normalizes internally)
    std::vector<int32_t> labels;
    std::string split;

    int64_t size() const { return features.defined() ? features.dim(0) : 0; }
    int64_t dim() const { return features.defined() ? features.dim(1) : 0; }

    void validate() const {
        if (!features.defined() || features.ndim() != 2)
            throw Error("FeatureBank: features must be [n x d]");
        if (features.dim(0) != static_cast<int64_t>(labels.size()))
            throw Error("FeatureBank: " + std::to_string(features.dim(0)) + " rows but " +
                        std::to_string(labels.size()) + " labels");
        for (float v : features.data())
            if (!std::isfinite(v)) throw Error("FeatureBank: non-finite feature value");
    }
};

// deterministic eval transform: the quiet weak policy degenerates to a
// full-frame resize, so the rng argument cannot influence the output
inline AugmentPolicy eval_policy(int64_t out_size) {
    AugmentPolicy p = weak_policy(out_size, 1.0f, 1.0f);
    p.flip_p = 0.0f;
    p.jitter_p = 0.0f;
    p.grayscale_p = 0.0f;
    p.blur_p = 0.0f;
    return p;
}

inline Tensor eval_transform(const ImageView& view, int64_t out_size,
                             const NormalizeStats& stats) {
    Rng rng(0);
    return weak_augment(view, rng, eval_policy(out_size), stats);
}

// one class-token row per image, batched forwards in eval mode
inline FeatureBank extract_features(const Network& net, const Dataset& ds, int64_t out_size,
                                    const NormalizeStats& stats, int64_t batch = 64,
                                    const std::string& split = "") {
    ds.validate();
    if (batch < 1) throw Error("extract_features: batch must be >= 1");
    std::vector<float> rows;
    int64_t d = -1;
    for (int64_t start = 0; start < ds.count; start += batch) {
        const int64_t stop = std::min(ds.count, start + batch);
        std::vector<Tensor> images;
        images.reserve(static_cast<size_t>(stop - start));
        for (int64_t i = start; i < stop; ++i)
            images.push_back(eval_transform(ds.view(i), out_size, stats));
        Tensor cls = net.backbone.forward(stack_images(images)).class_token.detach();
        d = cls.dim(1);
        rows.insert(rows.end(), cls.data().begin(), cls.data().end());
    }
    FeatureBank bank;
    bank.features = Tensor::from_data({ds.count, d}, std::move(rows), false);
    bank.labels = ds.labels;
    bank.split = split;
    bank.validate();
    return bank;
}

namespace detail {

inline std::vector<float> normalized_rows(const Tensor& features) {
    Tensor n = l2_normalize_rows(features);
    return n.data();
}

inline int32_t max_label(const std::vector<int32_t>& labels) {
    int32_t m = -1;
    for (int32_t l : labels) {
        if (l < 0) throw Error("evaluation: negative label");
        m = std::max(m, l);
    }
    return m;
}

}  // namespace detail

// weighted-vote kNN: top-k cosine neighbors, each voting e^{cos/tau} for its
// label; ties broken toward the smaller class index for determinism
inline float knn_accuracy(const FeatureBank& train, const FeatureBank& test, int64_t k,
                          float tau = 0.07f) {
    train.validate();
    test.validate();
    if (train.dim() != test.dim())
        throw Error("knn_accuracy: feature dims differ, " + std::to_string(train.dim()) + " vs " +
                    std::to_string(test.dim()));
    if (k < 1) throw Error("knn_accuracy: k must be >= 1");
    if (k > train.size())
        throw Error("knn_accuracy: k=" + std::to_string(k) + " exceeds train size " +
                    std::to_string(train.size()));
    if (tau <= 0.0f) throw Error("knn_accuracy: tau must be positive");
    const int64_t n_train = train.size(), n_test = test.size(), d = train.dim();
    const int32_t classes = detail::max_label(train.labels) + 1;
    const std::vector<float> a = detail::normalized_rows(train.features);
    const std::vector<float> b = detail::normalized_rows(test.features);

    int64_t correct = 0;
    std::vector<std::pair<float, int64_t>> sims(static_cast<size_t>(n_train));
    for (int64_t i = 0; i < n_test; ++i) {
        for (int64_t j = 0; j < n_train; ++j) {
            double dot = 0.0;
            for (int64_t c = 0; c < d; ++c)
                dot += static_cast<double>(b[i * d + c]) * static_cast<double>(a[j * d + c]);
            sims[static_cast<size_t>(j)] = {static_cast<float>(dot), j};
        }
        std::partial_sort(sims.begin(), sims.begin() + k, sims.end(),
                          [](const auto& x, const auto& y) {
                              return x.first > y.first ||
                                     (x.first == y.first && x.second < y.second);
                          });
        std::vector<double> votes(static_cast<size_t>(classes), 0.0);
        for (int64_t t = 0; t < k; ++t)
            votes[static_cast<size_t>(train.labels[static_cast<size_t>(sims[t].second)])] +=
                std::exp(static_cast<double>(sims[static_cast<size_t>(t)].first) / tau);
        const int32_t pred = static_cast<int32_t>(
            std::max_element(votes.begin(), votes.end()) - votes.begin());
        if (pred == test.labels[static_cast<size_t>(i)]) ++correct;
    }
    return static_cast<float>(correct) / static_cast<float>(n_test);
}

struct KnnSweep {
    std::vector<std::pair<int64_t, float>> per_k;
    float best = 0.0f;
    int64_t best_k = 0;
};

inline KnnSweep knn_classify(const FeatureBank& train, const FeatureBank& test,
                             std::vector<int64_t> k_list = {10, 20, 50, 100},
                             float tau = 0.07f) {
    if (k_list.empty()) throw Error("knn_classify: empty k list");
    KnnSweep sweep;
    for (int64_t k : k_list) {
        const float acc = knn_accuracy(train, test, k, tau);
        sweep.per_k.emplace_back(k, acc);
        if (sweep.best_k == 0 || acc > sweep.best) {
            sweep.best = acc;
            sweep.best_k = k;
        }
    }
    return sweep;
}

// single linear layer on frozen features: SGD with momentum 0.9 and a cosine
// learning-rate schedule, softmax cross-entropy
inline float linear_probe(const FeatureBank& train, const FeatureBank& test, int64_t epochs = 30,
                          float lr = 0.1f, int64_t batch = 128, uint64_t seed = 0) {
    train.validate();
    test.validate();
    if (train.dim() != test.dim())
        throw Error("linear_probe: feature dims differ, " + std::to_string(train.dim()) + " vs " +
                    std::to_string(test.dim()));
    if (epochs < 0 || batch < 1) throw Error("linear_probe: bad epochs/batch");
    if (train.size() < 1 || test.size() < 1) throw Error("linear_probe: empty bank");
    const int32_t classes =
        std::max(detail::max_label(train.labels), detail::max_label(test.labels)) + 1;
    bool varied = false;
    for (int32_t l : train.labels) varied = varied || (l != train.labels.front());
    if (!varied) throw Error("linear_probe: train labels contain a single class");
    const int64_t n = train.size(), d = train.dim();

    Rng init(derive_seed(seed, {0x70726f6265u}));
    std::vector<float> w0(static_cast<size_t>(d * classes));
    for (auto& v : w0) v = static_cast<float>(init.normal(0.0, 0.01));
    Tensor w = Tensor::from_data({d, classes}, std::move(w0), true);
    Tensor bias = Tensor::zeros({classes}, true);
    std::vector<float> vel_w(w.data().size(), 0.0f), vel_b(bias.data().size(), 0.0f);

    const int64_t steps_per_epoch = (n + batch - 1) / batch;
    const int64_t total = std::max<int64_t>(epochs * steps_per_epoch, 1);
    int64_t step = 0;
    for (int64_t epoch = 0; epoch < epochs; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(seed, {0x73687566u, static_cast<uint64_t>(epoch)}));
        shuffle_rng.shuffle(order);
        for (int64_t s = 0; s < steps_per_epoch; ++s, ++step) {
            const int64_t lo = s * batch, hi = std::min(n, lo + batch);
            const int64_t bsz = hi - lo;
            std::vector<float> xb(static_cast<size_t>(bsz * d));
            std::vector<float> onehot(static_cast<size_t>(bsz * classes), 0.0f);
            for (int64_t r = 0; r < bsz; ++r) {
                const int64_t src = order[static_cast<size_t>(lo + r)];
                std::copy_n(train.features.data().begin() + src * d, d, xb.begin() + r * d);
                onehot[static_cast<size_t>(
                    r * classes + train.labels[static_cast<size_t>(src)])] = 1.0f;
            }
            Tensor x = Tensor::from_data({bsz, d}, std::move(xb), false);
            Tensor targets = Tensor::from_data({bsz, classes}, std::move(onehot), false);
            Tensor logits = add_rowvec(matmul(x, w), bias);
            Tensor loss = mean_all(neg(sum_rows(mul(targets, log_clamped(softmax_rows(logits))))));
            w.zero_grad();
            bias.zero_grad();
            loss.backward();
            const float lr_now = cosine_value(step, total, lr, 0.0f);
            auto sgd = [lr_now](Tensor& p, std::vector<float>& vel) {
                const auto& g = p.raw_grad();
                auto& data = p.raw_data();
                for (size_t i = 0; i < data.size(); ++i) {
                    vel[i] = 0.9f * vel[i] + g[i];
                    data[i] -= lr_now * vel[i];
                }
            };
            sgd(w, vel_w);
            sgd(bias, vel_b);
        }
    }

    // final test top-1
    Tensor logits = add_rowvec(matmul(test.features, w), bias);
    int64_t correct = 0;
    for (int64_t i = 0; i < test.size(); ++i) {
        const float* row = logits.data().data() + i * classes;
        const int32_t pred =
            static_cast<int32_t>(std::max_element(row, row + classes) - row);
        if (pred == test.labels[static_cast<size_t>(i)]) ++correct;
    }
    return static_cast<float>(correct) / static_cast<float>(test.size());
}

// ---------------------------------------------------------------------------
// feature export — features.bin
// magic "MGFT" | version u32 LE | n u32 LE | d u32 LE | n*d f32 LE | n u32 LE
// ---------------------------------------------------------------------------

inline void save_feature_bank(const FeatureBank& bank, const std::string& path) {
    bank.validate();
    std::ofstream os = open_for_write(path);
    os.write("MGFT", 4);
    write_u32le(os, kFeatureVersion);
    write_u32le(os, static_cast<uint32_t>(bank.size()));
    write_u32le(os, static_cast<uint32_t>(bank.dim()));
    write_f32le_array(os, bank.features.data());
    for (int32_t l : bank.labels) write_u32le(os, static_cast<uint32_t>(l));
    if (!os) throw Error("feature export: write failed: " + path);
}

inline FeatureBank load_feature_bank(const std::string& path) {
    std::ifstream is = open_for_read(path);
    expect_magic(is, "MGFT", path);
    const uint32_t version = read_u32le(is, path + " version");
    if (version != kFeatureVersion)
        throw Error(path + ": unsupported feature file version " + std::to_string(version));
    const int64_t n = read_u32le(is, path + " row count");
    const int64_t d = read_u32le(is, path + " feature dim");
    std::vector<float> rows = read_f32le_array(is, static_cast<size_t>(n * d), path + " features");
    FeatureBank bank;
    bank.features = Tensor::from_data({n, d}, std::move(rows), false);
    bank.labels.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        bank.labels[static_cast<size_t>(i)] =
            static_cast<int32_t>(read_u32le(is, path + " labels"));
    bank.validate();
    return bank;
}

}  // namespace mugs
