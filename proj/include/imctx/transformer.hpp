#pragma once

// A small decoder-only transformer for in-context regression, trained from
// scratch on synthetic function-class tasks with hand-written backprop.
//
// Sequences interleave x- and y-tokens: x_0, y_0, x_1, y_1, ..., x_n. The
// model predicts y_i at every x_i position (causal attention, so x_i sees
// only x_0..x_i and y_0..y_{i-1}). Blocks are pre-LayerNorm GPT-2 style
// with a GELU MLP of width 4D.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "imctx/common.hpp"
#include "imctx/io.hpp"

namespace imctx::icl {

// Fixed 64-byte alignment keeps Eigen's vectorized kernels, and so the
// floating-point results, independent of where the heap places a buffer.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

struct IclConfig {
    std::size_t input_dim = 5;
    std::size_t embed_dim = 64;
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t max_context = 40;
    double learning_rate = 1e-3;
    std::size_t batch_size = 64;
    std::size_t steps = 5000;
    std::uint64_t seed = 0;

    std::size_t head_dim() const { return embed_dim / heads; }
    /// Tokens in a full sequence: max_context (x, y) pairs plus one query.
    std::size_t max_tokens() const { return 2 * max_context + 1; }

    void validate() const {
        if (input_dim == 0 || input_dim > 10) throw UsageError("input_dim must be in 1..10");
        if (embed_dim == 0 || layers == 0 || heads == 0 || max_context == 0 || batch_size == 0)
            throw UsageError("transformer sizes must be positive");
        if (embed_dim % heads != 0)
            throw UsageError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                             std::to_string(heads));
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw UsageError("learning rate must be >= 0");
    }

    nlohmann::ordered_json to_json() const {
        return {{"input_dim", input_dim},   {"embed_dim", embed_dim},         {"layers", layers},
                {"heads", heads},           {"max_context", max_context},     {"learning_rate", learning_rate},
                {"batch_size", batch_size}, {"steps", steps},                 {"seed", seed}};
    }

    static IclConfig from_json(const nlohmann::json& j) {
        IclConfig c;
        c.input_dim = j.at("input_dim").get<std::size_t>();
        c.embed_dim = j.at("embed_dim").get<std::size_t>();
        c.layers = j.at("layers").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.max_context = j.at("max_context").get<std::size_t>();
        c.learning_rate = j.at("learning_rate").get<double>();
        c.batch_size = j.at("batch_size").get<std::size_t>();
        c.steps = j.at("steps").get<std::size_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

/// Interleaved sequences of equal length. `xs` is [batch][points][dim] and
/// `ys` is [batch][points]; the last y of each sequence is a target only.
template <typename Scalar>
struct SequenceBatch {
    std::size_t batch = 0, points = 0, dim = 0;
    AlignedVector<Scalar> xs;
    AlignedVector<Scalar> ys;

    SequenceBatch() = default;
    SequenceBatch(std::size_t b, std::size_t p, std::size_t d)
        : batch(b), points(p), dim(d), xs(b * p * d, Scalar(0)), ys(b * p, Scalar(0)) {}

    std::size_t tokens() const { return 2 * points - 1; }
    Scalar& x(std::size_t b, std::size_t i, std::size_t j) { return xs[(b * points + i) * dim + j]; }
    Scalar x(std::size_t b, std::size_t i, std::size_t j) const { return xs[(b * points + i) * dim + j]; }
    Scalar& y(std::size_t b, std::size_t i) { return ys[b * points + i]; }
    Scalar y(std::size_t b, std::size_t i) const { return ys[b * points + i]; }
};

struct TensorInfo {
    std::string name;
    std::size_t rows = 0, cols = 0, offset = 0;
    enum class Kind { Weight, Bias, Gain } kind = Kind::Weight;
    std::size_t size() const { return rows * cols; }
};

/// Offsets of every parameter tensor inside one flat buffer.
struct ParamLayout {
    std::vector<TensorInfo> tensors;
    std::size_t total = 0;

    struct Block {
        std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2;
    };
    std::size_t x_w, x_b, y_w, y_b, pos, lnf_g, lnf_b, head_w, head_b;
    std::vector<Block> blocks;

    explicit ParamLayout(const IclConfig& c) {
        const auto D = c.embed_dim;
        x_w = add("x_embed.w", c.input_dim, D, TensorInfo::Kind::Weight);
        x_b = add("x_embed.b", 1, D, TensorInfo::Kind::Bias);
        y_w = add("y_embed.w", 1, D, TensorInfo::Kind::Weight);
        y_b = add("y_embed.b", 1, D, TensorInfo::Kind::Bias);
        pos = add("pos_embed", c.max_tokens(), D, TensorInfo::Kind::Weight);
        for (std::size_t l = 0; l < c.layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            Block b{};
            b.ln1_g = add(p + "ln1.g", 1, D, TensorInfo::Kind::Gain);
            b.ln1_b = add(p + "ln1.b", 1, D, TensorInfo::Kind::Bias);
            b.w_qkv = add(p + "attn.w_qkv", D, 3 * D, TensorInfo::Kind::Weight);
            b.b_qkv = add(p + "attn.b_qkv", 1, 3 * D, TensorInfo::Kind::Bias);
            b.w_o = add(p + "attn.w_out", D, D, TensorInfo::Kind::Weight);
            b.b_o = add(p + "attn.b_out", 1, D, TensorInfo::Kind::Bias);
            b.ln2_g = add(p + "ln2.g", 1, D, TensorInfo::Kind::Gain);
            b.ln2_b = add(p + "ln2.b", 1, D, TensorInfo::Kind::Bias);
            b.w_1 = add(p + "mlp.w_in", D, 4 * D, TensorInfo::Kind::Weight);
            b.b_1 = add(p + "mlp.b_in", 1, 4 * D, TensorInfo::Kind::Bias);
            b.w_2 = add(p + "mlp.w_out", 4 * D, D, TensorInfo::Kind::Weight);
            b.b_2 = add(p + "mlp.b_out", 1, D, TensorInfo::Kind::Bias);
            blocks.push_back(b);
        }
        lnf_g = add("ln_f.g", 1, D, TensorInfo::Kind::Gain);
        lnf_b = add("ln_f.b", 1, D, TensorInfo::Kind::Bias);
        head_w = add("head.w", D, 1, TensorInfo::Kind::Weight);
        head_b = add("head.b", 1, 1, TensorInfo::Kind::Bias);
    }

private:
    std::size_t add(std::string name, std::size_t r, std::size_t c, TensorInfo::Kind k) {
        tensors.push_back({std::move(name), r, c, total, k});
        total += r * c;
        return tensors.size() - 1;
    }
};

/// Parameter count as a pure function of the config.
inline std::size_t parameter_count(const IclConfig& c) { return ParamLayout(c).total; }

template <typename Scalar>
class IclModel {
public:
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
    using ColVec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using MapMat = Eigen::Map<Mat>;
    using CMapMat = Eigen::Map<const Mat>;
    using MapRow = Eigen::Map<RowVec>;
    using CMapRow = Eigen::Map<const RowVec>;

    static constexpr Scalar kLnEps = Scalar(1e-5);
    static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

    /// Weights ~ N(0, 0.02²); biases zero; LayerNorm gains one.
    explicit IclModel(const IclConfig& config) : config_(config), layout_((config.validate(), config)) {
        params_.assign(layout_.total, Scalar(0));
        grads_.assign(layout_.total, Scalar(0));
        adam_m_.assign(layout_.total, Scalar(0));
        adam_v_.assign(layout_.total, Scalar(0));
        auto rng = make_rng(config.seed, 0x1c1);
        std::normal_distribution<double> normal(0.0, 0.02);
        for (const auto& t : layout_.tensors) {
            Scalar* p = params_.data() + t.offset;
            for (std::size_t i = 0; i < t.size(); ++i) {
                switch (t.kind) {
                    case TensorInfo::Kind::Weight: p[i] = static_cast<Scalar>(normal(rng)); break;
                    case TensorInfo::Kind::Bias: p[i] = Scalar(0); break;
                    case TensorInfo::Kind::Gain: p[i] = Scalar(1); break;
                }
            }
        }
    }

    const IclConfig& config() const { return config_; }
    const ParamLayout& layout() const { return layout_; }
    AlignedVector<Scalar>& parameters() { return params_; }
    const AlignedVector<Scalar>& parameters() const { return params_; }
    const AlignedVector<Scalar>& gradients() const { return grads_; }
    std::uint64_t step() const { return step_; }

    bool parameters_finite() const {
        return std::all_of(params_.begin(), params_.end(), [](Scalar v) { return std::isfinite(v); });
    }

    /// Predictions at every x position, shape [batch][points].
    AlignedVector<Scalar> forward(const SequenceBatch<Scalar>& batch) const {
        Cache cache;
        run_forward(batch, cache, false);
        return cache.preds;
    }

    /// Mean squared error over batch and x positions; fills gradients().
    Scalar loss_and_gradient(const SequenceBatch<Scalar>& batch) {
        Cache cache;
        run_forward(batch, cache, true);
        const auto& preds = cache.preds;
        const auto count = static_cast<Scalar>(preds.size());
        Scalar loss = 0;
        AlignedVector<Scalar> dpred(preds.size());
        for (std::size_t i = 0; i < preds.size(); ++i) {
            Scalar e = preds[i] - batch.ys[i];
            loss += e * e;
            dpred[i] = Scalar(2) * e / count;
        }
        loss /= count;
        std::fill(grads_.begin(), grads_.end(), Scalar(0));
        run_backward(batch, cache, dpred);
        return loss;
    }

    /// One Adam step on `batch`; returns the pre-update loss.
    Scalar train_step(const SequenceBatch<Scalar>& batch, double lr) {
        Scalar loss = loss_and_gradient(batch);
        if (!std::isfinite(loss))
            throw RuntimeError("non-finite training loss at step " + std::to_string(step_ + 1));
        ++step_;
        const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const double g = grads_[i];
            const double m = kBeta1 * adam_m_[i] + (1.0 - kBeta1) * g;
            const double v = kBeta2 * adam_v_[i] + (1.0 - kBeta2) * g * g;
            adam_m_[i] = static_cast<Scalar>(m);
            adam_v_[i] = static_cast<Scalar>(v);
            params_[i] = static_cast<Scalar>(params_[i] - lr * (m / bc1) / (std::sqrt(v / bc2) + kAdamEps));
        }
        if (!parameters_finite())
            throw RuntimeError("non-finite parameters after step " + std::to_string(step_));
        return loss;
    }

    /// Query prediction for one prompt of up to max_context pairs. Inputs
    /// shorter than input_dim are zero-padded.
    double predict(const std::vector<Vector>& xs, const Vector& ys, const Vector& query) const {
        if (xs.size() != ys.size()) throw DataError("context inputs and labels differ in length");
        if (xs.size() > config_.max_context)
            throw UsageError("context of " + std::to_string(xs.size()) + " exceeds the model maximum " +
                             std::to_string(config_.max_context));
        SequenceBatch<Scalar> b(1, xs.size() + 1, config_.input_dim);
        auto put = [&](std::size_t i, const Vector& x) {
            if (x.size() > config_.input_dim)
                throw DataError("input of dimension " + std::to_string(x.size()) + " exceeds model input_dim " +
                                std::to_string(config_.input_dim));
            for (std::size_t j = 0; j < x.size(); ++j) b.x(0, i, j) = static_cast<Scalar>(x[j]);
        };
        for (std::size_t i = 0; i < xs.size(); ++i) {
            put(i, xs[i]);
            b.y(0, i) = static_cast<Scalar>(ys[i]);
        }
        put(xs.size(), query);
        return static_cast<double>(forward(b).back());
    }

    // --- serialization -----------------------------------------------------

    nlohmann::ordered_json to_json(bool with_optimizer = true) const {
        nlohmann::ordered_json j;
        j["format"] = "imctx-icl-checkpoint-v1";
        j["config"] = config_.to_json();
        j["step"] = step_;
        auto dump = [&](const AlignedVector<Scalar>& buf) {
            nlohmann::ordered_json arr = nlohmann::ordered_json::array();
            for (const auto& t : layout_.tensors) {
                std::vector<double> data(buf.begin() + static_cast<std::ptrdiff_t>(t.offset),
                                         buf.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size()));
                arr.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"data", data}});
            }
            return arr;
        };
        j["tensors"] = dump(params_);
        if (with_optimizer) {
            j["adam_m"] = dump(adam_m_);
            j["adam_v"] = dump(adam_v_);
        }
        return j;
    }

    static IclModel from_json(const nlohmann::json& j) {
        if (j.value("format", "") != "imctx-icl-checkpoint-v1") throw DataError("not an ICL checkpoint");
        IclModel m(IclConfig::from_json(j.at("config")));
        m.step_ = j.at("step").get<std::uint64_t>();
        auto load = [&](const nlohmann::json& arr, AlignedVector<Scalar>& buf) {
            if (arr.size() != m.layout_.tensors.size()) throw DataError("checkpoint tensor count mismatch");
            for (std::size_t i = 0; i < arr.size(); ++i) {
                const auto& t = m.layout_.tensors[i];
                const auto& e = arr[i];
                if (e.at("name").get<std::string>() != t.name) throw DataError("checkpoint tensor order mismatch at " + t.name);
                auto shape = e.at("shape").get<std::vector<std::size_t>>();
                if (shape.size() != 2 || shape[0] != t.rows || shape[1] != t.cols)
                    throw DataError("checkpoint shape mismatch for " + t.name);
                auto data = e.at("data").get<std::vector<double>>();
                if (data.size() != t.size()) throw DataError("checkpoint size mismatch for " + t.name);
                for (std::size_t k = 0; k < data.size(); ++k) buf[t.offset + k] = static_cast<Scalar>(data[k]);
            }
        };
        load(j.at("tensors"), m.params_);
        if (j.contains("adam_m")) load(j.at("adam_m"), m.adam_m_);
        if (j.contains("adam_v")) load(j.at("adam_v"), m.adam_v_);
        return m;
    }

    void save(const std::filesystem::path& path, bool with_optimizer = true) const {
        write_file_atomic(path, to_json(with_optimizer).dump() + "\n");
    }

    static IclModel load(const std::filesystem::path& path) {
        try {
            return from_json(nlohmann::json::parse(read_file(path)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ": malformed checkpoint: " + e.what());
        }
    }

private:
    struct LnCache {
        Mat xhat;
        ColVec rstd;
    };
    struct LayerCache {
        Mat a, qkv, att, m, u, tanh_u, g;
        LnCache ln1, ln2;
        std::vector<Mat> probs;  // [batch * heads], each T×T
    };
    struct Cache {
        std::vector<LayerCache> layers;
        Mat z;
        LnCache lnf;
        AlignedVector<Scalar> preds;
    };

    CMapMat cmat(std::size_t idx) const {
        const auto& t = layout_.tensors[idx];
        return CMapMat(params_.data() + t.offset, static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols));
    }
    CMapRow crow(std::size_t idx) const {
        const auto& t = layout_.tensors[idx];
        return CMapRow(params_.data() + t.offset, static_cast<Eigen::Index>(t.size()));
    }
    MapMat gmat(std::size_t idx) {
        const auto& t = layout_.tensors[idx];
        return MapMat(grads_.data() + t.offset, static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols));
    }
    MapRow grow(std::size_t idx) {
        const auto& t = layout_.tensors[idx];
        return MapRow(grads_.data() + t.offset, static_cast<Eigen::Index>(t.size()));
    }

    static void layer_norm(const Mat& x, const CMapRow& g, const CMapRow& b, Mat& out, LnCache& c) {
        const ColVec mean = x.rowwise().mean();
        c.xhat = x.colwise() - mean;
        c.rstd = (c.xhat.array().square().rowwise().mean() + kLnEps).rsqrt().matrix();
        c.xhat.array().colwise() *= c.rstd.array();
        out = (c.xhat.array().rowwise() * g.array()).rowwise() + b.array();
    }

    /// Returns dx given dout; accumulates dg and db.
    static Mat layer_norm_backward(const Mat& dout, const CMapRow& g, const LnCache& c, MapRow dg, MapRow db) {
        const Scalar inv_d = Scalar(1) / static_cast<Scalar>(dout.cols());
        dg += (dout.array() * c.xhat.array()).colwise().sum().matrix();
        db += dout.colwise().sum();
        Mat dxhat = dout.array().rowwise() * g.array();
        const ColVec m1 = dxhat.rowwise().sum() * inv_d;
        const ColVec m2 = (dxhat.array() * c.xhat.array()).rowwise().sum().matrix() * inv_d;
        dxhat.colwise() -= m1;
        dxhat.array() -= c.xhat.array().colwise() * m2.array();
        dxhat.array().colwise() *= c.rstd.array();
        return dxhat;
    }

    static constexpr Scalar kGeluC = Scalar(0.7978845608028654);  // sqrt(2/pi)
    static constexpr Scalar kGeluA = Scalar(0.044715);

    void run_forward(const SequenceBatch<Scalar>& batch, Cache& cache, bool keep) const {
        const std::size_t B = batch.batch, P = batch.points, T = batch.tokens();
        const auto D = static_cast<Eigen::Index>(config_.embed_dim);
        const std::size_t H = config_.heads;
        const auto hd = static_cast<Eigen::Index>(config_.head_dim());
        if (P == 0) throw UsageError("sequences need at least the query token");
        if (T > config_.max_tokens())
            throw UsageError("sequence of " + std::to_string(P - 1) + " context pairs exceeds max_context " +
                             std::to_string(config_.max_context));
        if (batch.dim != config_.input_dim) throw UsageError("batch input dimension does not match the model");
        const auto N = static_cast<Eigen::Index>(B * T);

        // Embedding.
        Mat h(N, D);
        {
            auto wx = cmat(layout_.x_w);
            auto bx = crow(layout_.x_b);
            auto wy = crow(layout_.y_w);
            auto by = crow(layout_.y_b);
            auto pos = cmat(layout_.pos);
            CMapMat X(batch.xs.data(), static_cast<Eigen::Index>(B * P), static_cast<Eigen::Index>(batch.dim));
            Mat ex = X * wx;
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t t = 0; t < T; ++t) {
                    auto r = static_cast<Eigen::Index>(b * T + t);
                    if (t % 2 == 0)
                        h.row(r) = ex.row(static_cast<Eigen::Index>(b * P + t / 2)) + bx;
                    else
                        h.row(r) = batch.y(b, t / 2) * wy + by;
                    h.row(r) += pos.row(static_cast<Eigen::Index>(t));
                }
            }
        }

        const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
        if (keep) cache.layers.resize(layout_.blocks.size());
        for (std::size_t l = 0; l < layout_.blocks.size(); ++l) {
            const auto& blk = layout_.blocks[l];
            LayerCache local;
            LayerCache& lc = keep ? cache.layers[l] : local;
            layer_norm(h, crow(blk.ln1_g), crow(blk.ln1_b), lc.a, lc.ln1);
            lc.qkv = lc.a * cmat(blk.w_qkv);
            lc.qkv.rowwise() += crow(blk.b_qkv);
            lc.att.setZero(N, D);
            if (keep) lc.probs.assign(B * H, Mat());
            for (std::size_t b = 0; b < B; ++b) {
                const auto r0 = static_cast<Eigen::Index>(b * T);
                const auto Tn = static_cast<Eigen::Index>(T);
                for (std::size_t hh = 0; hh < H; ++hh) {
                    const auto c0 = static_cast<Eigen::Index>(hh) * hd;
                    auto Q = lc.qkv.block(r0, c0, Tn, hd);
                    auto K = lc.qkv.block(r0, D + c0, Tn, hd);
                    auto V = lc.qkv.block(r0, 2 * D + c0, Tn, hd);
                    Mat S = (Q * K.transpose()) * scale;
                    for (Eigen::Index i = 0; i < Tn; ++i) {
                        Scalar mx = S.row(i).head(i + 1).maxCoeff();
                        Scalar sum = 0;
                        for (Eigen::Index j = 0; j <= i; ++j) {
                            S(i, j) = std::exp(S(i, j) - mx);
                            sum += S(i, j);
                        }
                        for (Eigen::Index j = 0; j <= i; ++j) S(i, j) /= sum;
                        for (Eigen::Index j = i + 1; j < Tn; ++j) S(i, j) = 0;
                    }
                    lc.att.block(r0, c0, Tn, hd).noalias() = S * V;
                    if (keep) lc.probs[b * H + hh] = std::move(S);
                }
            }
            h += lc.att * cmat(blk.w_o);
            h.rowwise() += crow(blk.b_o);
            layer_norm(h, crow(blk.ln2_g), crow(blk.ln2_b), lc.m, lc.ln2);
            lc.u = lc.m * cmat(blk.w_1);
            lc.u.rowwise() += crow(blk.b_1);
            lc.tanh_u = (kGeluC * (lc.u.array() + kGeluA * lc.u.array().cube())).tanh();
            lc.g = Scalar(0.5) * lc.u.array() * (Scalar(1) + lc.tanh_u.array());
            h += lc.g * cmat(blk.w_2);
            h.rowwise() += crow(blk.b_2);
        }
        layer_norm(h, crow(layout_.lnf_g), crow(layout_.lnf_b), cache.z, cache.lnf);
        const auto hw = cmat(layout_.head_w);
        const Scalar hb = params_[layout_.tensors[layout_.head_b].offset];
        cache.preds.assign(B * P, Scalar(0));
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < P; ++i)
                cache.preds[b * P + i] = cache.z.row(static_cast<Eigen::Index>(b * T + 2 * i)).dot(hw.col(0)) + hb;
    }

    void run_backward(const SequenceBatch<Scalar>& batch, const Cache& cache, const AlignedVector<Scalar>& dpred) {
        const std::size_t B = batch.batch, P = batch.points, T = batch.tokens();
        const auto D = static_cast<Eigen::Index>(config_.embed_dim);
        const std::size_t H = config_.heads;
        const auto hd = static_cast<Eigen::Index>(config_.head_dim());
        const auto N = static_cast<Eigen::Index>(B * T);
        const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));

        // Readout.
        Mat dz = Mat::Zero(N, D);
        {
            const auto hw = cmat(layout_.head_w);
            auto dhw = gmat(layout_.head_w);
            Scalar& dhb = grads_[layout_.tensors[layout_.head_b].offset];
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < P; ++i) {
                    const auto r = static_cast<Eigen::Index>(b * T + 2 * i);
                    const Scalar dp = dpred[b * P + i];
                    dz.row(r) = dp * hw.col(0).transpose();
                    dhw.col(0) += dp * cache.z.row(r).transpose();
                    dhb += dp;
                }
        }
        Mat dh = layer_norm_backward(dz, crow(layout_.lnf_g), cache.lnf, grow(layout_.lnf_g), grow(layout_.lnf_b));

        for (std::size_t l = layout_.blocks.size(); l-- > 0;) {
            const auto& blk = layout_.blocks[l];
            const auto& lc = cache.layers[l];
            // MLP.
            gmat(blk.w_2).noalias() += lc.g.transpose() * dh;
            grow(blk.b_2) += dh.colwise().sum();
            Mat du = dh * cmat(blk.w_2).transpose();
            {
                const auto& u = lc.u.array();
                const auto& t = lc.tanh_u.array();
                du.array() *= Scalar(0.5) * (Scalar(1) + t) +
                              Scalar(0.5) * u * (Scalar(1) - t.square()) * kGeluC * (Scalar(1) + Scalar(3) * kGeluA * u.square());
            }
            gmat(blk.w_1).noalias() += lc.m.transpose() * du;
            grow(blk.b_1) += du.colwise().sum();
            Mat dm = du * cmat(blk.w_1).transpose();
            dh += layer_norm_backward(dm, crow(blk.ln2_g), lc.ln2, grow(blk.ln2_g), grow(blk.ln2_b));
            // Attention.
            gmat(blk.w_o).noalias() += lc.att.transpose() * dh;
            grow(blk.b_o) += dh.colwise().sum();
            Mat datt = dh * cmat(blk.w_o).transpose();
            Mat dqkv = Mat::Zero(N, 3 * D);
            for (std::size_t b = 0; b < B; ++b) {
                const auto r0 = static_cast<Eigen::Index>(b * T);
                const auto Tn = static_cast<Eigen::Index>(T);
                for (std::size_t hh = 0; hh < H; ++hh) {
                    const auto c0 = static_cast<Eigen::Index>(hh) * hd;
                    const Mat& Pm = lc.probs[b * H + hh];
                    auto Q = lc.qkv.block(r0, c0, Tn, hd);
                    auto K = lc.qkv.block(r0, D + c0, Tn, hd);
                    auto V = lc.qkv.block(r0, 2 * D + c0, Tn, hd);
                    auto dO = datt.block(r0, c0, Tn, hd);
                    dqkv.block(r0, 2 * D + c0, Tn, hd).noalias() = Pm.transpose() * dO;
                    Mat dP = dO * V.transpose();
                    Mat dS(Tn, Tn);
                    for (Eigen::Index i = 0; i < Tn; ++i) {
                        const Scalar rowdot = dP.row(i).dot(Pm.row(i));
                        dS.row(i) = (Pm.row(i).array() * (dP.row(i).array() - rowdot)).matrix();
                    }
                    dS *= scale;
                    dqkv.block(r0, c0, Tn, hd).noalias() = dS * K;
                    dqkv.block(r0, D + c0, Tn, hd).noalias() = dS.transpose() * Q;
                }
            }
            gmat(blk.w_qkv).noalias() += lc.a.transpose() * dqkv;
            grow(blk.b_qkv) += dqkv.colwise().sum();
            Mat da = dqkv * cmat(blk.w_qkv).transpose();
            dh += layer_norm_backward(da, crow(blk.ln1_g), lc.ln1, grow(blk.ln1_g), grow(blk.ln1_b));
        }

        // Embedding.
        auto dpos = gmat(layout_.pos);
        auto dwx = gmat(layout_.x_w);
        auto dbx = grow(layout_.x_b);
        auto dwy = grow(layout_.y_w);
        auto dby = grow(layout_.y_b);
        Mat dex(static_cast<Eigen::Index>(B * P), D);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t) {
                const auto r = static_cast<Eigen::Index>(b * T + t);
                dpos.row(static_cast<Eigen::Index>(t)) += dh.row(r);
                if (t % 2 == 0) {
                    dex.row(static_cast<Eigen::Index>(b * P + t / 2)) = dh.row(r);
                    dbx += dh.row(r);
                } else {
                    dwy += batch.y(b, t / 2) * dh.row(r);
                    dby += dh.row(r);
                }
            }
        // Rows of dex for the final y of each sequence are unused (no y-token).
        CMapMat X(batch.xs.data(), static_cast<Eigen::Index>(B * P), static_cast<Eigen::Index>(batch.dim));
        dwx.noalias() += X.transpose() * dex;
    }

    IclConfig config_;
    ParamLayout layout_;
    AlignedVector<Scalar> params_, grads_, adam_m_, adam_v_;
    std::uint64_t step_ = 0;
};

/// Mean squared error between two equal-length vectors.
template <typename Scalar>
Scalar loss_mse(std::span<const Scalar> predictions, std::span<const Scalar> targets) {
    if (predictions.size() != targets.size()) throw UsageError("loss inputs differ in shape");
    if (predictions.empty()) return Scalar(0);
    Scalar s = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) s += (predictions[i] - targets[i]) * (predictions[i] - targets[i]);
    return s / static_cast<Scalar>(predictions.size());
}

// ---------------------------------------------------------------------------
// Synthetic tasks

enum class FunctionClass { Linear, Quadratic, Constant };

inline FunctionClass parse_function_class(const std::string& s) {
    if (s == "linear") return FunctionClass::Linear;
    if (s == "quadratic") return FunctionClass::Quadratic;
    if (s == "constant") return FunctionClass::Constant;
    throw UsageError("unknown function class: " + s);
}

inline const char* to_string(FunctionClass f) {
    switch (f) {
        case FunctionClass::Linear: return "linear";
        case FunctionClass::Quadratic: return "quadratic";
        case FunctionClass::Constant: return "constant";
    }
    return "?";
}

/// Draws fresh tasks: x ~ N(0, I_d), w ~ N(0, I_d) per sequence, and
///   linear:    f(x) = w·x
///   quadratic: f(x) = (w·x)² / d
///   constant:  f(x) = c,  c ~ N(0, 1)
/// Observed labels are f(x) + σ·ε.
class TaskSampler {
public:
    TaskSampler(FunctionClass fc, std::size_t dim, double noise_std, std::uint64_t seed)
        : fc_(fc), dim_(dim), noise_(noise_std), rng_(make_rng(seed, 0x7a5c)) {
        if (noise_std < 0.0) throw UsageError("task noise must be non-negative");
        if (dim == 0) throw UsageError("task dimension must be positive");
    }

    FunctionClass function_class() const { return fc_; }
    double noise_std() const { return noise_; }
    std::size_t dim() const { return dim_; }

    /// Noisy labels in `batch.ys`; noiseless function values in `clean`.
    template <typename Scalar>
    SequenceBatch<Scalar> sample(std::size_t batch, std::size_t points, std::vector<double>* clean = nullptr) {
        SequenceBatch<Scalar> out(batch, points, dim_);
        if (clean) clean->assign(batch * points, 0.0);
        std::vector<double> w(dim_);
        for (std::size_t b = 0; b < batch; ++b) {
            for (auto& v : w) v = normal_(rng_);
            const double c = normal_(rng_);
            for (std::size_t i = 0; i < points; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < dim_; ++j) {
                    const double x = normal_(rng_);
                    out.x(b, i, j) = static_cast<Scalar>(x);
                    dot += w[j] * x;
                }
                double f = 0.0;
                switch (fc_) {
                    case FunctionClass::Linear: f = dot; break;
                    case FunctionClass::Quadratic: f = dot * dot / static_cast<double>(dim_); break;
                    case FunctionClass::Constant: f = c; break;
                }
                const double y = noise_ > 0.0 ? f + noise_ * normal_(rng_) : f;
                out.y(b, i) = static_cast<Scalar>(y);
                if (clean) (*clean)[b * points + i] = f;
            }
        }
        return out;
    }

private:
    FunctionClass fc_;
    std::size_t dim_;
    double noise_;
    std::mt19937_64 rng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

template <typename Scalar>
struct TrainResult {
    IclModel<Scalar> model;
    std::vector<double> losses;
    /// Snapshots every max(1, steps/10) steps: (step, parameters).
    std::vector<std::pair<std::size_t, AlignedVector<Scalar>>> checkpoints;
};

/// Trains for config.steps steps on fresh batches of max_context + 1 points.
template <typename Scalar>
TrainResult<Scalar> train(const IclConfig& config, TaskSampler& sampler,
                          const std::function<void(std::size_t, double)>& on_step = {}) {
    if (sampler.dim() != config.input_dim) throw UsageError("sampler dimension does not match the model input_dim");
    TrainResult<Scalar> r{IclModel<Scalar>(config), {}, {}};
    r.losses.reserve(config.steps);
    const std::size_t every = std::max<std::size_t>(1, config.steps / 10);
    for (std::size_t s = 0; s < config.steps; ++s) {
        auto batch = sampler.sample<Scalar>(config.batch_size, config.max_context + 1);
        double loss = r.model.train_step(batch, config.learning_rate);
        r.losses.push_back(loss);
        if ((s + 1) % every == 0) r.checkpoints.emplace_back(s + 1, r.model.parameters());
        if (on_step) on_step(s + 1, loss);
    }
    return r;
}

struct IncontextPoint {
    std::size_t k = 0;
    double model_mse = 0.0;
    double average_mse = 0.0;
};

/// Query MSE against the noiseless target for each context length, with the
/// label-averaging baseline on the same tasks (predicting 0 at k = 0).
template <typename Scalar>
std::vector<IncontextPoint> evaluate_incontext(const IclModel<Scalar>& model, TaskSampler& sampler,
                                               const std::vector<std::size_t>& ks, std::size_t tasks) {
    std::vector<IncontextPoint> out;
    constexpr std::size_t kChunk = 256;
    for (auto k : ks) {
        if (k > model.config().max_context)
            throw UsageError("context length " + std::to_string(k) + " exceeds max_context");
        double se_model = 0.0, se_avg = 0.0;
        for (std::size_t done = 0; done < tasks; done += kChunk) {
            const std::size_t nb = std::min(kChunk, tasks - done);
            std::vector<double> clean;
            auto batch = sampler.sample<Scalar>(nb, k + 1, &clean);
            auto preds = model.forward(batch);
            for (std::size_t b = 0; b < nb; ++b) {
                const double target = clean[b * (k + 1) + k];
                const double pm = static_cast<double>(preds[b * (k + 1) + k]);
                double avg = 0.0;
                for (std::size_t i = 0; i < k; ++i) avg += static_cast<double>(batch.y(b, i));
                avg = k > 0 ? avg / static_cast<double>(k) : 0.0;
                se_model += (pm - target) * (pm - target);
                se_avg += (avg - target) * (avg - target);
            }
        }
        out.push_back({k, se_model / static_cast<double>(tasks), se_avg / static_cast<double>(tasks)});
    }
    return out;
}

}  // namespace imctx::icl
