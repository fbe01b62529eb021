#pragma once

// Fixed-capacity FIFO vector stores. A ring buffer holds the last `capacity`
// pushed rows; retrieval is cosine top-k with ties broken oldest-first.
// Contents are always gradient-detached copies — nothing here ever joins the
// autodiff graph as a tracked node.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "mugs/tensor.hpp"

namespace mugs {

class FifoBuffer {
public:
    FifoBuffer() = default;

    FifoBuffer(int64_t capacity, int64_t dim) : capacity_(capacity), dim_(dim) {
        if (capacity < 1 || dim < 1)
            throw ConfigError("FifoBuffer: capacity and dim must be positive, got " +
                              std::to_string(capacity) + " and " + std::to_string(dim));
        storage_.resize(static_cast<size_t>(capacity * dim));
    }

    int64_t capacity() const { return capacity_; }
    int64_t dim() const { return dim_; }
    int64_t fill() const { return fill_; }

    // Appends rows in batch order, evicting the oldest beyond capacity.
    void push_batch(const Tensor& batch) {
        detail::check(batch.ndim() == 2 && batch.dim(1) == dim_,
                      "FifoBuffer::push_batch: expected [n x " + std::to_string(dim_) + "], got " +
                          shape_str(batch.shape()));
        detail::check(batch.dim(0) >= 1, "FifoBuffer::push_batch: empty batch");
        if (!all_finite(batch))
            throw Error("FifoBuffer::push_batch: refusing to store non-finite values");
        const float* src = batch.data().data();
        for (int64_t i = 0; i < batch.dim(0); ++i) {
            float* dst;
            if (fill_ < capacity_) {
                dst = row_ptr((start_ + fill_) % capacity_);
                ++fill_;
            } else {
                dst = row_ptr(start_);
                start_ = (start_ + 1) % capacity_;
            }
            std::memcpy(dst, src + i * dim_, static_cast<size_t>(dim_) * sizeof(float));
        }
    }

    // The k stored rows most cosine-similar to the query, descending; ties go
    // to older rows. Returned tensor is a detached copy.
    Tensor topk_neighbors(const Tensor& query, int64_t k) const {
        detail::check(query.ndim() == 1 && query.dim(0) == dim_,
                      "FifoBuffer::topk_neighbors: expected query [" + std::to_string(dim_) +
                          "], got " + shape_str(query.shape()));
        detail::check(k >= 1, "FifoBuffer::topk_neighbors: k must be >= 1");
        if (fill_ < k)
            throw Error("FifoBuffer::topk_neighbors: insufficient neighbors, fill " +
                        std::to_string(fill_) + " < k " + std::to_string(k) +
                        " (warm the buffer up first)");
        const float* q = query.data().data();
        double qsq = 0.0;
        for (int64_t j = 0; j < dim_; ++j) qsq += static_cast<double>(q[j]) * q[j];
        if (qsq <= 1e-24) throw Error("FifoBuffer::topk_neighbors: degenerate zero-norm query");
        const double qnorm = std::sqrt(qsq);

        std::vector<std::pair<float, int64_t>> sims;  // (similarity, logical index)
        sims.reserve(static_cast<size_t>(fill_));
        for (int64_t i = 0; i < fill_; ++i) {
            const float* row = row_ptr(logical_to_physical(i));
            double dot = 0.0, rsq = 0.0;
            for (int64_t j = 0; j < dim_; ++j) {
                dot += static_cast<double>(row[j]) * q[j];
                rsq += static_cast<double>(row[j]) * row[j];
            }
            const float sim = rsq <= 1e-24 ? -2.0f
                                           : static_cast<float>(dot / (qnorm * std::sqrt(rsq)));
            sims.emplace_back(sim, i);
        }
        std::stable_sort(sims.begin(), sims.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });

        std::vector<float> out(static_cast<size_t>(k * dim_));
        for (int64_t i = 0; i < k; ++i)
            std::memcpy(out.data() + i * dim_, row_ptr(logical_to_physical(sims[static_cast<size_t>(i)].second)),
                        static_cast<size_t>(dim_) * sizeof(float));
        return Tensor::from_data({k, dim_}, std::move(out), false);
    }

    // Read-only copy of current contents, oldest first.
    Tensor snapshot() const {
        detail::check(fill_ >= 1, "FifoBuffer::snapshot: buffer is empty");
        return Tensor::from_data({fill_, dim_}, rows_oldest_first(), false);
    }

    // Serialization helpers: contents in logical (oldest-first) order.
    std::vector<float> rows_oldest_first() const {
        std::vector<float> out(static_cast<size_t>(fill_ * dim_));
        for (int64_t i = 0; i < fill_; ++i)
            std::memcpy(out.data() + i * dim_, row_ptr(logical_to_physical(i)),
                        static_cast<size_t>(dim_) * sizeof(float));
        return out;
    }

    void restore(const std::vector<float>& rows, int64_t fill) {
        if (fill < 0 || fill > capacity_ ||
            static_cast<size_t>(fill * dim_) != rows.size())
            throw Error("FifoBuffer::restore: fill " + std::to_string(fill) +
                        " inconsistent with payload of " + std::to_string(rows.size()) + " values");
        start_ = 0;
        fill_ = fill;
        std::memcpy(storage_.data(), rows.data(), rows.size() * sizeof(float));
    }

private:
    float* row_ptr(int64_t physical) { return storage_.data() + physical * dim_; }
    const float* row_ptr(int64_t physical) const { return storage_.data() + physical * dim_; }
    int64_t logical_to_physical(int64_t logical) const { return (start_ + logical) % capacity_; }

    int64_t capacity_ = 0;
    int64_t dim_ = 0;
    int64_t fill_ = 0;
    int64_t start_ = 0;
    std::vector<float> storage_;
};

}  // namespace mugs
