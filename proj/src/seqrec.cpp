#include "care/seqrec.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "care/digest.hpp"

namespace care::rec {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kClipNorm = 5.0;
constexpr double kInvSqrt2Pi = 0.3989422804014326779399460599343;

template <class T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475244)));
}

template <class T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
    return cdf + x * std::exp(T(-0.5) * x * x) * T(kInvSqrt2Pi);
}

// y = x W^T + b, x:(n,in) W:(out,in) b:(1,out) y:(n,out)
template <class T>
void linear(const Mat<T>& x, const Mat<T>& w, const Mat<T>& b, Mat<T>& y) {
    y = Mat<T>(x.rows, w.rows);
    for (int r = 0; r < x.rows; ++r) {
        const T* xr = x.row(r);
        T* yr = y.row(r);
        for (int o = 0; o < w.rows; ++o) {
            const T* wr = w.row(o);
            T acc = b.data[static_cast<std::size_t>(o)];
            for (int i = 0; i < w.cols; ++i) acc += xr[i] * wr[i];
            yr[o] = acc;
        }
    }
}

// Accumulates gradients for y = x W^T + b given dy. dx may be null.
template <class T>
void linear_backward(const Mat<T>& x, const Mat<T>& w, const Mat<T>& dy, Mat<T>& dw, Mat<T>& db,
                     Mat<T>* dx) {
    for (int r = 0; r < x.rows; ++r) {
        const T* xr = x.row(r);
        const T* dyr = dy.row(r);
        for (int o = 0; o < w.rows; ++o) {
            const T g = dyr[o];
            if (g == T(0)) continue;
            T* dwr = dw.row(o);
            for (int i = 0; i < w.cols; ++i) dwr[i] += g * xr[i];
            db.data[static_cast<std::size_t>(o)] += g;
        }
    }
    if (dx != nullptr) {
        for (int r = 0; r < x.rows; ++r) {
            const T* dyr = dy.row(r);
            T* dxr = dx->row(r);
            for (int o = 0; o < w.rows; ++o) {
                const T g = dyr[o];
                if (g == T(0)) continue;
                const T* wr = w.row(o);
                for (int i = 0; i < w.cols; ++i) dxr[i] += g * wr[i];
            }
        }
    }
}

template <class T>
void layer_norm(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& bias, Mat<T>& out, Mat<T>& xhat,
                std::vector<T>& inv_std) {
    const int d = x.cols;
    out = Mat<T>(x.rows, d);
    xhat = Mat<T>(x.rows, d);
    inv_std.assign(static_cast<std::size_t>(x.rows), T(0));
    for (int r = 0; r < x.rows; ++r) {
        const T* xr = x.row(r);
        T mean = 0;
        for (int j = 0; j < d; ++j) mean += xr[j];
        mean /= T(d);
        T var = 0;
        for (int j = 0; j < d; ++j) {
            const T c = xr[j] - mean;
            var += c * c;
        }
        var /= T(d);
        const T is = T(1) / std::sqrt(var + T(kLayerNormEps));
        inv_std[static_cast<std::size_t>(r)] = is;
        T* xh = xhat.row(r);
        T* o = out.row(r);
        for (int j = 0; j < d; ++j) {
            xh[j] = (xr[j] - mean) * is;
            o[j] = gain.data[static_cast<std::size_t>(j)] * xh[j] +
                   bias.data[static_cast<std::size_t>(j)];
        }
    }
}

// Accumulates dgain/dbias and adds the input gradient into dx.
template <class T>
void layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const std::vector<T>& inv_std,
                         const Mat<T>& gain, Mat<T>& dgain, Mat<T>& dbias, Mat<T>& dx) {
    const int d = dy.cols;
    std::vector<T> dxhat(static_cast<std::size_t>(d));
    for (int r = 0; r < dy.rows; ++r) {
        const T* dyr = dy.row(r);
        const T* xh = xhat.row(r);
        T m1 = 0, m2 = 0;
        for (int j = 0; j < d; ++j) {
            dgain.data[static_cast<std::size_t>(j)] += dyr[j] * xh[j];
            dbias.data[static_cast<std::size_t>(j)] += dyr[j];
            const T v = dyr[j] * gain.data[static_cast<std::size_t>(j)];
            dxhat[static_cast<std::size_t>(j)] = v;
            m1 += v;
            m2 += v * xh[j];
        }
        m1 /= T(d);
        m2 /= T(d);
        const T is = inv_std[static_cast<std::size_t>(r)];
        T* dxr = dx.row(r);
        for (int j = 0; j < d; ++j) {
            dxr[j] += is * (dxhat[static_cast<std::size_t>(j)] - m1 - xh[j] * m2);
        }
    }
}

// Inverted dropout: fills `scale` with mask/(1-p) (all ones in inference) and
// multiplies x in place.
template <class T>
void apply_dropout(Mat<T>& x, T p, bool training, Rng* rng, Mat<T>& scale) {
    scale = Mat<T>(x.rows, x.cols);
    if (!training || p <= T(0)) {
        std::fill(scale.data.begin(), scale.data.end(), T(1));
        return;
    }
    const T keep_scale = T(1) / (T(1) - p);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const T s = rng->bernoulli(static_cast<double>(p)) ? T(0) : keep_scale;
        scale.data[i] = s;
        x.data[i] *= s;
    }
}

template <class T>
Mat<T> gaussian(int rows, int cols, Rng& rng, double stddev) {
    Mat<T> m(rows, cols);
    for (auto& v : m.data) v = static_cast<T>(rng.normal(0.0, stddev));
    return m;
}

template <class T>
Mat<T> ones(int rows, int cols) {
    Mat<T> m(rows, cols);
    std::fill(m.data.begin(), m.data.end(), T(1));
    return m;
}

Mat<float> graph_smoothed_base(const corpus::EntityCatalog& catalog,
                               const std::vector<corpus::KGTriple>& triples,
                               const RecConfig& config, Rng& rng) {
    const int vocab = catalog.size();
    const int d = config.embed_dim;
    Mat<float> base(vocab + 1, d);
    for (int e = 0; e < vocab; ++e) {
        for (int j = 0; j < d; ++j) base(e, j) = static_cast<float>(rng.normal(0.0, 0.02));
    }
    // [MASK] row stays zero.

    std::vector<std::unordered_set<int>> neighbors(static_cast<std::size_t>(vocab));
    for (const corpus::KGTriple& t : triples) {
        neighbors[static_cast<std::size_t>(t.head)].insert(t.tail);
        neighbors[static_cast<std::size_t>(t.tail)].insert(t.head);
    }

    Mat<float> out = base;
    std::vector<double> mean(static_cast<std::size_t>(d));
    for (int e = 0; e < vocab; ++e) {
        const auto& nbrs = neighbors[static_cast<std::size_t>(e)];
        if (nbrs.empty()) continue;
        std::fill(mean.begin(), mean.end(), 0.0);
        for (int n : nbrs) {
            for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += base(n, j);
        }
        for (int j = 0; j < d; ++j) {
            out(e, j) = 0.5f * base(e, j) +
                        0.5f * static_cast<float>(mean[static_cast<std::size_t>(j)] /
                                                  static_cast<double>(nbrs.size()));
        }
    }
    return out;
}

template <class T>
std::vector<std::pair<std::string, Mat<T>*>> tensor_list(ModelT<T>& model) {
    std::vector<std::pair<std::string, Mat<T>*>> out;
    model.visit([&](const std::string& name, Mat<T>& m) { out.emplace_back(name, &m); });
    return out;
}

}  // namespace

void RecConfig::validate() const {
    if (embed_dim <= 0 || heads <= 0 || layers <= 0 || max_sequence_length <= 0) {
        throw std::invalid_argument("embed_dim, heads, layers, max_sequence_length must be positive");
    }
    if (embed_dim % heads != 0) {
        throw std::invalid_argument("embed_dim must be divisible by heads");
    }
    if (dropout < 0.0f || dropout >= 1.0f) {
        throw std::invalid_argument("dropout must lie in [0, 1)");
    }
    // learning_rate 0 is tolerated so a zero-step run can double as a no-op
    // baseline; negative rates are rejected.
    if (learning_rate < 0.0f) {
        throw std::invalid_argument("learning_rate must be non-negative");
    }
    if (epochs < 0 || batch_size <= 0) {
        throw std::invalid_argument("epochs must be >= 0 and batch_size positive");
    }
}

std::vector<int> CandidateSet::ids() const {
    std::vector<int> out;
    out.reserve(entries.size());
    for (const Entry& e : entries) out.push_back(e.item_id);
    return out;
}

Mat<float> graph_smoothed_init(const corpus::EntityCatalog& catalog,
                               const std::vector<corpus::KGTriple>& triples,
                               const RecConfig& config) {
    Rng rng(config.seed);
    return graph_smoothed_base(catalog, triples, config, rng);
}

RecModel init_model(const corpus::EntityCatalog& catalog,
                    const std::vector<corpus::KGTriple>& triples, const RecConfig& config) {
    config.validate();
    RecModel m;
    m.config = config;
    m.item_count = catalog.item_count;
    m.attribute_count = catalog.attribute_count;
    const int d = config.embed_dim;

    Rng rng(config.seed);
    m.entity_emb = graph_smoothed_base(catalog, triples, config, rng);
    m.pos_emb = gaussian<float>(config.max_sequence_length + 1, d, rng, 0.02);
    m.blocks.resize(static_cast<std::size_t>(config.layers));
    for (BlockParams<float>& blk : m.blocks) {
        blk.ln1_gain = ones<float>(1, d);
        blk.ln1_bias = Mat<float>(1, d);
        blk.wq = gaussian<float>(d, d, rng, 0.02);
        blk.bq = Mat<float>(1, d);
        blk.wk = gaussian<float>(d, d, rng, 0.02);
        blk.bk = Mat<float>(1, d);
        blk.wv = gaussian<float>(d, d, rng, 0.02);
        blk.bv = Mat<float>(1, d);
        blk.wo = gaussian<float>(d, d, rng, 0.02);
        blk.bo = Mat<float>(1, d);
        blk.ln2_gain = ones<float>(1, d);
        blk.ln2_bias = Mat<float>(1, d);
        blk.wf1 = gaussian<float>(4 * d, d, rng, 0.02);
        blk.bf1 = Mat<float>(1, 4 * d);
        blk.wf2 = gaussian<float>(d, 4 * d, rng, 0.02);
        blk.bf2 = Mat<float>(1, d);
    }
    m.lnf_gain = ones<float>(1, d);
    m.lnf_bias = Mat<float>(1, d);
    m.w1 = gaussian<float>(d, d, rng, 0.02);
    m.b1 = Mat<float>(1, d);
    m.w2 = gaussian<float>(m.item_count, d, rng, 0.02);
    m.b2 = Mat<float>(1, m.item_count);
    return m;
}

MaskedExample mask_last(const linker::EntitySequence& seq, int item_count, int mask_id) {
    if (seq.entries.size() < 2) {
        throw std::invalid_argument("sequence too short to mask (need length >= 2)");
    }
    const int last = seq.entries.back();
    if (last < 0 || last >= item_count) {
        throw std::invalid_argument("final sequence entry is not an item");
    }
    MaskedExample ex;
    ex.input_ids = seq.entries;
    ex.input_ids.back() = mask_id;
    ex.label = last;
    return ex;
}

template <class T>
std::vector<T> forward(const ModelT<T>& model, const std::vector<int>& input_ids, bool training,
                       Rng* dropout_rng, ForwardTrace<T>* trace) {
    const int n = static_cast<int>(input_ids.size());
    const int d = model.config.embed_dim;
    const int heads = model.config.heads;
    const int dh = d / heads;
    if (n < 1 || n > model.config.max_sequence_length + 1) {
        throw std::invalid_argument("input length out of range");
    }
    int mask_pos = -1;
    for (int i = 0; i < n; ++i) {
        const int id = input_ids[i];
        if (id < 0 || id > model.mask_id()) {
            throw std::invalid_argument("invalid entity id " + std::to_string(id));
        }
        if (id == model.mask_id()) mask_pos = i;
    }
    if (mask_pos < 0) throw std::invalid_argument("input contains no [MASK] token");
    if (training && dropout_rng == nullptr) {
        throw std::invalid_argument("training-mode forward needs a dropout rng");
    }

    ForwardTrace<T> local;
    ForwardTrace<T>& tr = trace != nullptr ? *trace : local;
    tr = ForwardTrace<T>{};
    tr.input_ids = input_ids;
    tr.mask_pos = mask_pos;

    const T p = static_cast<T>(model.config.dropout);

    // h_i^0 = entity embedding + positional embedding
    Mat<T> x(n, d);
    for (int i = 0; i < n; ++i) {
        const T* e = model.entity_emb.row(input_ids[i]);
        const T* pe = model.pos_emb.row(i);
        T* xr = x.row(i);
        for (int j = 0; j < d; ++j) xr[j] = e[j] + pe[j];
    }
    apply_dropout(x, p, training, dropout_rng, tr.emb_drop);
    tr.x0 = x;

    tr.blocks.resize(model.blocks.size());
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const BlockParams<T>& blk = model.blocks[l];
        auto& tb = tr.blocks[l];

        layer_norm(x, blk.ln1_gain, blk.ln1_bias, tb.ln1_out, tb.ln1_xhat, tb.ln1_inv_std);
        linear(tb.ln1_out, blk.wq, blk.bq, tb.q);
        linear(tb.ln1_out, blk.wk, blk.bk, tb.k);
        linear(tb.ln1_out, blk.wv, blk.bv, tb.v);

        tb.z = Mat<T>(n, d);
        tb.attn.assign(static_cast<std::size_t>(heads), Mat<T>(n, n));
        const T scale = T(1) / std::sqrt(T(dh));
        std::vector<T> srow(static_cast<std::size_t>(n));
        for (int h = 0; h < heads; ++h) {
            const int off = h * dh;
            Mat<T>& attn = tb.attn[static_cast<std::size_t>(h)];
            for (int r = 0; r < n; ++r) {
                const T* qr = tb.q.row(r) + off;
                T maxv = std::numeric_limits<T>::lowest();
                for (int c = 0; c < n; ++c) {
                    const T* kc = tb.k.row(c) + off;
                    T s = 0;
                    for (int j = 0; j < dh; ++j) s += qr[j] * kc[j];
                    s *= scale;
                    srow[static_cast<std::size_t>(c)] = s;
                    maxv = std::max(maxv, s);
                }
                T denom = 0;
                for (int c = 0; c < n; ++c) {
                    const T e = std::exp(srow[static_cast<std::size_t>(c)] - maxv);
                    srow[static_cast<std::size_t>(c)] = e;
                    denom += e;
                }
                T* ar = attn.row(r);
                T* zr = tb.z.row(r) + off;
                for (int c = 0; c < n; ++c) ar[c] = srow[static_cast<std::size_t>(c)] / denom;
                for (int j = 0; j < dh; ++j) zr[j] = 0;
                for (int c = 0; c < n; ++c) {
                    const T a = ar[c];
                    const T* vc = tb.v.row(c) + off;
                    for (int j = 0; j < dh; ++j) zr[j] += a * vc[j];
                }
            }
        }

        Mat<T> attn_out;
        linear(tb.z, blk.wo, blk.bo, attn_out);
        apply_dropout(attn_out, p, training, dropout_rng, tb.attn_drop);
        tb.x_mid = Mat<T>(n, d);
        for (std::size_t i = 0; i < tb.x_mid.data.size(); ++i) {
            tb.x_mid.data[i] = x.data[i] + attn_out.data[i];
        }

        layer_norm(tb.x_mid, blk.ln2_gain, blk.ln2_bias, tb.ln2_out, tb.ln2_xhat, tb.ln2_inv_std);
        linear(tb.ln2_out, blk.wf1, blk.bf1, tb.ff_pre);
        tb.ff_act = Mat<T>(n, 4 * d);
        for (std::size_t i = 0; i < tb.ff_pre.data.size(); ++i) {
            tb.ff_act.data[i] = gelu(tb.ff_pre.data[i]);
        }
        Mat<T> ff_out;
        linear(tb.ff_act, blk.wf2, blk.bf2, ff_out);
        apply_dropout(ff_out, p, training, dropout_rng, tb.ff_drop);
        tb.x_out = Mat<T>(n, d);
        for (std::size_t i = 0; i < tb.x_out.data.size(); ++i) {
            tb.x_out.data[i] = tb.x_mid.data[i] + ff_out.data[i];
        }
        x = tb.x_out;
    }

    layer_norm(x, model.lnf_gain, model.lnf_bias, tr.hidden, tr.lnf_xhat, tr.lnf_inv_std);

    // Eq. 2 head on the [MASK] hidden state.
    const T* u = tr.hidden.row(mask_pos);
    tr.head_pre.assign(static_cast<std::size_t>(d), T(0));
    tr.head_act.assign(static_cast<std::size_t>(d), T(0));
    for (int i = 0; i < d; ++i) {
        const T* wr = model.w1.row(i);
        T acc = model.b1.data[static_cast<std::size_t>(i)];
        for (int j = 0; j < d; ++j) acc += wr[j] * u[j];
        tr.head_pre[static_cast<std::size_t>(i)] = acc;
        tr.head_act[static_cast<std::size_t>(i)] = gelu(acc);
    }
    std::vector<T> scores(static_cast<std::size_t>(model.item_count));
    for (int i = 0; i < model.item_count; ++i) {
        const T* wr = model.w2.row(i);
        T acc = model.b2.data[static_cast<std::size_t>(i)];
        for (int j = 0; j < d; ++j) acc += wr[j] * tr.head_act[static_cast<std::size_t>(j)];
        scores[static_cast<std::size_t>(i)] = acc;
    }
    return scores;
}

template <class T>
T cross_entropy(const std::vector<T>& scores, int label, std::vector<T>* dscores) {
    if (label < 0 || static_cast<std::size_t>(label) >= scores.size()) {
        throw std::invalid_argument("label outside score range");
    }
    T maxv = scores[0];
    for (T s : scores) maxv = std::max(maxv, s);
    T denom = 0;
    for (T s : scores) denom += std::exp(s - maxv);
    const T logsumexp = maxv + std::log(denom);
    if (dscores != nullptr) {
        dscores->assign(scores.size(), T(0));
        for (std::size_t i = 0; i < scores.size(); ++i) {
            (*dscores)[i] = std::exp(scores[i] - maxv) / denom;
        }
        (*dscores)[static_cast<std::size_t>(label)] -= T(1);
    }
    return logsumexp - scores[static_cast<std::size_t>(label)];
}

template <class T>
void backward(const ModelT<T>& model, const ForwardTrace<T>& trace, const std::vector<T>& dscores,
              ModelT<T>& grads) {
    const int n = static_cast<int>(trace.input_ids.size());
    const int d = model.config.embed_dim;
    const int heads = model.config.heads;
    const int dh = d / heads;

    // Head: scores = GELU(u W1^T + b1) W2^T + b2 with u = H[mask].
    const T* u = trace.hidden.row(trace.mask_pos);
    std::vector<T> dact(static_cast<std::size_t>(d), T(0));
    for (int i = 0; i < model.item_count; ++i) {
        const T g = dscores[static_cast<std::size_t>(i)];
        if (g == T(0)) continue;
        const T* wr = model.w2.row(i);
        T* dwr = grads.w2.row(i);
        for (int j = 0; j < d; ++j) {
            dact[static_cast<std::size_t>(j)] += g * wr[j];
            dwr[j] += g * trace.head_act[static_cast<std::size_t>(j)];
        }
        grads.b2.data[static_cast<std::size_t>(i)] += g;
    }
    std::vector<T> du(static_cast<std::size_t>(d), T(0));
    for (int i = 0; i < d; ++i) {
        const T g = dact[static_cast<std::size_t>(i)] *
                    gelu_grad(trace.head_pre[static_cast<std::size_t>(i)]);
        if (g == T(0)) continue;
        const T* wr = model.w1.row(i);
        T* dwr = grads.w1.row(i);
        for (int j = 0; j < d; ++j) {
            du[static_cast<std::size_t>(j)] += g * wr[j];
            dwr[j] += g * u[j];
        }
        grads.b1.data[static_cast<std::size_t>(i)] += g;
    }

    Mat<T> dh_mat(n, d);
    T* mask_row = dh_mat.row(trace.mask_pos);
    for (int j = 0; j < d; ++j) mask_row[j] = du[static_cast<std::size_t>(j)];

    Mat<T> dx(n, d);
    layer_norm_backward(dh_mat, trace.lnf_xhat, trace.lnf_inv_std, model.lnf_gain, grads.lnf_gain,
                        grads.lnf_bias, dx);

    for (int l = static_cast<int>(model.blocks.size()) - 1; l >= 0; --l) {
        const BlockParams<T>& blk = model.blocks[static_cast<std::size_t>(l)];
        BlockParams<T>& gblk = grads.blocks[static_cast<std::size_t>(l)];
        const auto& tb = trace.blocks[static_cast<std::size_t>(l)];

        // FFN half: x_out = x_mid + drop(W2f GELU(W1f LN2(x_mid)))
        Mat<T> dff(n, d);
        for (std::size_t i = 0; i < dff.data.size(); ++i) {
            dff.data[i] = dx.data[i] * tb.ff_drop.data[i];
        }
        Mat<T> dpre(n, 4 * d);
        linear_backward(tb.ff_act, blk.wf2, dff, gblk.wf2, gblk.bf2, &dpre);
        for (std::size_t i = 0; i < dpre.data.size(); ++i) {
            dpre.data[i] *= gelu_grad(tb.ff_pre.data[i]);
        }
        Mat<T> dln2(n, d);
        linear_backward(tb.ln2_out, blk.wf1, dpre, gblk.wf1, gblk.bf1, &dln2);
        Mat<T> dx_mid = dx;  // residual pass-through
        layer_norm_backward(dln2, tb.ln2_xhat, tb.ln2_inv_std, blk.ln2_gain, gblk.ln2_gain,
                            gblk.ln2_bias, dx_mid);

        // Attention half: x_mid = x_in + drop(Wo concat_h(A_h V_h))
        Mat<T> dattn_out(n, d);
        for (std::size_t i = 0; i < dattn_out.data.size(); ++i) {
            dattn_out.data[i] = dx_mid.data[i] * tb.attn_drop.data[i];
        }
        Mat<T> dz(n, d);
        linear_backward(tb.z, blk.wo, dattn_out, gblk.wo, gblk.bo, &dz);

        Mat<T> dq(n, d), dk(n, d), dv(n, d);
        const T scale = T(1) / std::sqrt(T(dh));
        std::vector<T> da_row(static_cast<std::size_t>(n));
        for (int h = 0; h < heads; ++h) {
            const int off = h * dh;
            const Mat<T>& attn = tb.attn[static_cast<std::size_t>(h)];
            for (int r = 0; r < n; ++r) {
                const T* dzr = dz.row(r) + off;
                const T* ar = attn.row(r);
                // dA then softmax backward within the row
                T dot = 0;
                for (int c = 0; c < n; ++c) {
                    const T* vc = tb.v.row(c) + off;
                    T da = 0;
                    for (int j = 0; j < dh; ++j) da += dzr[j] * vc[j];
                    da_row[static_cast<std::size_t>(c)] = da;
                    dot += da * ar[c];
                }
                for (int c = 0; c < n; ++c) {
                    const T ds = ar[c] * (da_row[static_cast<std::size_t>(c)] - dot) * scale;
                    const T* kc = tb.k.row(c) + off;
                    const T* qr = tb.q.row(r) + off;
                    T* dqr = dq.row(r) + off;
                    T* dkc = dk.row(c) + off;
                    for (int j = 0; j < dh; ++j) {
                        dqr[j] += ds * kc[j];
                        dkc[j] += ds * qr[j];
                    }
                    // dV via A^T dZ
                    T* dvc = dv.row(c) + off;
                    const T a = ar[c];
                    for (int j = 0; j < dh; ++j) dvc[j] += a * dzr[j];
                }
            }
        }

        Mat<T> dln1(n, d);
        linear_backward(tb.ln1_out, blk.wq, dq, gblk.wq, gblk.bq, &dln1);
        linear_backward(tb.ln1_out, blk.wk, dk, gblk.wk, gblk.bk, &dln1);
        linear_backward(tb.ln1_out, blk.wv, dv, gblk.wv, gblk.bv, &dln1);

        Mat<T> dx_in = dx_mid;  // residual pass-through
        layer_norm_backward(dln1, tb.ln1_xhat, tb.ln1_inv_std, blk.ln1_gain, gblk.ln1_gain,
                            gblk.ln1_bias, dx_in);
        dx = std::move(dx_in);
    }

    // Embedding: x0 = drop(E[id] + P[pos])
    for (int r = 0; r < n; ++r) {
        const T* dxr = dx.row(r);
        const T* drop = trace.emb_drop.row(r);
        T* de = grads.entity_emb.row(trace.input_ids[static_cast<std::size_t>(r)]);
        T* dp = grads.pos_emb.row(r);
        for (int j = 0; j < d; ++j) {
            const T g = dxr[j] * drop[j];
            de[j] += g;
            dp[j] += g;
        }
    }
}

template <class T>
ModelT<T> make_zero_like(const ModelT<T>& model) {
    ModelT<T> z;
    z.config = model.config;
    z.item_count = model.item_count;
    z.attribute_count = model.attribute_count;
    z.entity_emb = Mat<T>(model.entity_emb.rows, model.entity_emb.cols);
    z.pos_emb = Mat<T>(model.pos_emb.rows, model.pos_emb.cols);
    z.blocks.resize(model.blocks.size());
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const BlockParams<T>& b = model.blocks[l];
        BlockParams<T>& g = z.blocks[l];
        g.ln1_gain = Mat<T>(b.ln1_gain.rows, b.ln1_gain.cols);
        g.ln1_bias = Mat<T>(b.ln1_bias.rows, b.ln1_bias.cols);
        g.wq = Mat<T>(b.wq.rows, b.wq.cols);
        g.bq = Mat<T>(b.bq.rows, b.bq.cols);
        g.wk = Mat<T>(b.wk.rows, b.wk.cols);
        g.bk = Mat<T>(b.bk.rows, b.bk.cols);
        g.wv = Mat<T>(b.wv.rows, b.wv.cols);
        g.bv = Mat<T>(b.bv.rows, b.bv.cols);
        g.wo = Mat<T>(b.wo.rows, b.wo.cols);
        g.bo = Mat<T>(b.bo.rows, b.bo.cols);
        g.ln2_gain = Mat<T>(b.ln2_gain.rows, b.ln2_gain.cols);
        g.ln2_bias = Mat<T>(b.ln2_bias.rows, b.ln2_bias.cols);
        g.wf1 = Mat<T>(b.wf1.rows, b.wf1.cols);
        g.bf1 = Mat<T>(b.bf1.rows, b.bf1.cols);
        g.wf2 = Mat<T>(b.wf2.rows, b.wf2.cols);
        g.bf2 = Mat<T>(b.bf2.rows, b.bf2.cols);
    }
    z.lnf_gain = Mat<T>(model.lnf_gain.rows, model.lnf_gain.cols);
    z.lnf_bias = Mat<T>(model.lnf_bias.rows, model.lnf_bias.cols);
    z.w1 = Mat<T>(model.w1.rows, model.w1.cols);
    z.b1 = Mat<T>(model.b1.rows, model.b1.cols);
    z.w2 = Mat<T>(model.w2.rows, model.w2.cols);
    z.b2 = Mat<T>(model.b2.rows, model.b2.cols);
    return z;
}

ModelT<double> widen(const RecModel& model) {
    ModelT<double> out;
    out.config = model.config;
    out.item_count = model.item_count;
    out.attribute_count = model.attribute_count;
    auto widen_mat = [](const Mat<float>& m) {
        Mat<double> w(m.rows, m.cols);
        for (std::size_t i = 0; i < m.data.size(); ++i) w.data[i] = m.data[i];
        return w;
    };
    out.entity_emb = widen_mat(model.entity_emb);
    out.pos_emb = widen_mat(model.pos_emb);
    out.blocks.resize(model.blocks.size());
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const BlockParams<float>& b = model.blocks[l];
        BlockParams<double>& g = out.blocks[l];
        g.ln1_gain = widen_mat(b.ln1_gain);
        g.ln1_bias = widen_mat(b.ln1_bias);
        g.wq = widen_mat(b.wq);
        g.bq = widen_mat(b.bq);
        g.wk = widen_mat(b.wk);
        g.bk = widen_mat(b.bk);
        g.wv = widen_mat(b.wv);
        g.bv = widen_mat(b.bv);
        g.wo = widen_mat(b.wo);
        g.bo = widen_mat(b.bo);
        g.ln2_gain = widen_mat(b.ln2_gain);
        g.ln2_bias = widen_mat(b.ln2_bias);
        g.wf1 = widen_mat(b.wf1);
        g.bf1 = widen_mat(b.bf1);
        g.wf2 = widen_mat(b.wf2);
        g.bf2 = widen_mat(b.bf2);
    }
    out.lnf_gain = widen_mat(model.lnf_gain);
    out.lnf_bias = widen_mat(model.lnf_bias);
    out.w1 = widen_mat(model.w1);
    out.b1 = widen_mat(model.b1);
    out.w2 = widen_mat(model.w2);
    out.b2 = widen_mat(model.b2);
    return out;
}

TrainResult train(RecModel& model, const std::vector<linker::EntitySequence>& sequences,
                  const RecConfig& config) {
    config.validate();
    const std::size_t max_len = static_cast<std::size_t>(config.max_sequence_length);

    // Trim each sequence to its last item mention and drop the too-short ones.
    std::vector<std::vector<int>> prepped;
    std::size_t discarded = 0;
    for (const linker::EntitySequence& seq : sequences) {
        std::ptrdiff_t last_item = -1;
        for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(seq.entries.size()) - 1; i >= 0; --i) {
            if (seq.entries[static_cast<std::size_t>(i)] < model.item_count) {
                last_item = i;
                break;
            }
        }
        if (last_item < 1) {
            ++discarded;
            continue;
        }
        std::vector<int> trimmed(seq.entries.begin(), seq.entries.begin() + last_item + 1);
        if (trimmed.size() > max_len) {
            trimmed.erase(trimmed.begin(),
                          trimmed.end() - static_cast<std::ptrdiff_t>(max_len));
        }
        prepped.push_back(std::move(trimmed));
    }
    if (prepped.empty()) {
        throw std::runtime_error("empty training set: no sequence ends with an item");
    }

    TrainResult result;
    result.sequences_used = prepped.size();
    result.sequences_discarded = discarded;

    Rng rng(config.seed);
    RecModel grads = make_zero_like(model);
    auto params = tensor_list(model);
    auto gparams = tensor_list(grads);
    std::vector<std::size_t> order(prepped.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            grads.visit([](const std::string&, Mat<float>& m) { m.zero(); });

            for (std::size_t i = start; i < stop; ++i) {
                linker::EntitySequence seq{prepped[order[i]]};
                const MaskedExample ex = mask_last(seq, model.item_count, model.mask_id());
                ForwardTrace<float> tr;
                const std::vector<float> scores = forward(model, ex.input_ids, true, &rng, &tr);
                std::vector<float> dscores;
                epoch_loss += cross_entropy(scores, ex.label, &dscores);
                ++seen;
                backward(model, tr, dscores, grads);
            }

            const double batch_scale = 1.0 / static_cast<double>(stop - start);
            double sq_norm = 0.0;
            for (auto& [gname, gm] : gparams) {
                for (float g : gm->data) {
                    const double v = g * batch_scale;
                    sq_norm += v * v;
                }
            }
            const double norm = std::sqrt(sq_norm);
            const double clip = norm > kClipNorm ? kClipNorm / norm : 1.0;
            const float step = static_cast<float>(config.learning_rate * batch_scale * clip);

            for (std::size_t t = 0; t < params.size(); ++t) {
                Mat<float>& w = *params[t].second;
                const Mat<float>& g = *gparams[t].second;
                for (std::size_t j = 0; j < w.data.size(); ++j) {
                    w.data[j] -= step * g.data[j];
                }
            }
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
    }
    if (!all_finite(model)) {
        throw std::runtime_error("training diverged: non-finite weights");
    }
    return result;
}

CandidateSet recommend(const RecModel& model, const linker::EntitySequence& seq, int k) {
    if (k < 0) throw std::invalid_argument("k must be non-negative");
    const std::size_t max_len = static_cast<std::size_t>(model.config.max_sequence_length);
    std::vector<int> input(seq.entries);
    if (input.size() > max_len) {
        input.erase(input.begin(), input.end() - static_cast<std::ptrdiff_t>(max_len));
    }
    input.push_back(model.mask_id());

    const std::vector<float> scores = forward(model, input, false);
    std::vector<int> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const float sa = scores[static_cast<std::size_t>(a)];
        const float sb = scores[static_cast<std::size_t>(b)];
        if (sa != sb) return sa > sb;
        return a < b;
    });

    CandidateSet out;
    out.k = k;
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), order.size());
    out.entries.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        out.entries.push_back({order[i], scores[static_cast<std::size_t>(order[i])]});
    }
    return out;
}

GradCheckResult gradient_check(ModelT<double>& model, const linker::EntitySequence& example,
                               double epsilon, int min_coords, std::uint64_t seed) {
    const MaskedExample ex = mask_last(example, model.item_count, model.mask_id());

    ForwardTrace<double> tr;
    std::vector<double> scores = forward(model, ex.input_ids, false, nullptr, &tr);
    std::vector<double> dscores;
    cross_entropy(scores, ex.label, &dscores);
    ModelT<double> grads = make_zero_like(model);
    backward(model, tr, dscores, grads);

    auto params = tensor_list(model);
    auto gparams = tensor_list(grads);

    auto loss_at = [&]() {
        const std::vector<double> s = forward(model, ex.input_ids, false);
        return cross_entropy<double>(s, ex.label, nullptr);
    };

    Rng rng(seed);
    const int per_tensor =
        std::max<int>(1, (min_coords + static_cast<int>(params.size()) - 1) /
                             static_cast<int>(params.size()));
    GradCheckResult result;
    for (std::size_t t = 0; t < params.size(); ++t) {
        Mat<double>& tensor = *params[t].second;
        const Mat<double>& gtensor = *gparams[t].second;
        for (int s = 0; s < per_tensor; ++s) {
            const std::size_t idx = static_cast<std::size_t>(rng.uniform_int(tensor.data.size()));
            const double saved = tensor.data[idx];
            tensor.data[idx] = saved + epsilon;
            const double plus = loss_at();
            tensor.data[idx] = saved - epsilon;
            const double minus = loss_at();
            tensor.data[idx] = saved;

            const double numeric = (plus - minus) / (2.0 * epsilon);
            const double analytic = gtensor.data[idx];
            // Central differences at this epsilon carry ~1e-11 cancellation
            // noise; discrepancies under the absolute floor count as exact so
            // near-zero gradients do not drown the check in FD noise.
            const double diff = std::abs(numeric - analytic);
            const double rel =
                diff <= 1e-8 ? 0.0 : diff / std::max(std::abs(numeric), std::abs(analytic));
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_tensor = params[t].first;
                result.worst_analytic = analytic;
                result.worst_numeric = numeric;
            }
            ++result.coords_checked;
        }
    }
    return result;
}

namespace {

void put_u16(std::string& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float v) { put_u32(buf, std::bit_cast<std::uint32_t>(v)); }

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw CheckpointError("truncated checkpoint file");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= std::uint16_t(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

constexpr char kMagic[9] = "CARERec1";
constexpr std::uint32_t kFormatVersion = 1;

}  // namespace

void save_checkpoint(const RecModel& model, const std::string& path) {
    std::string buf;
    buf.append(kMagic, 8);
    put_u32(buf, kFormatVersion);

    const RecConfig& c = model.config;
    put_u32(buf, static_cast<std::uint32_t>(c.embed_dim));
    put_u32(buf, static_cast<std::uint32_t>(c.layers));
    put_u32(buf, static_cast<std::uint32_t>(c.heads));
    put_u32(buf, static_cast<std::uint32_t>(c.max_sequence_length));
    put_f32(buf, c.dropout);
    put_f32(buf, c.learning_rate);
    put_u32(buf, static_cast<std::uint32_t>(c.epochs));
    put_u32(buf, static_cast<std::uint32_t>(c.batch_size));
    put_u64(buf, c.seed);
    put_u32(buf, static_cast<std::uint32_t>(model.item_count));
    put_u32(buf, static_cast<std::uint32_t>(model.attribute_count));

    std::vector<std::pair<std::string, const Mat<float>*>> tensors;
    model.visit([&](const std::string& name, const Mat<float>& m) {
        tensors.emplace_back(name, &m);
    });

    put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, m] : tensors) {
        put_u16(buf, static_cast<std::uint16_t>(name.size()));
        buf += name;
        put_u32(buf, static_cast<std::uint32_t>(m->rows));
        put_u32(buf, static_cast<std::uint32_t>(m->cols));
    }
    for (const auto& [name, m] : tensors) {
        std::string data;
        data.reserve(m->data.size() * 4);
        for (float v : m->data) put_f32(data, v);
        put_u32(buf, crc32(data.data(), data.size()));
        buf += data;
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("write failed: " + path);
}

RecModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    Reader r{buf};
    if (r.bytes(8) != std::string(kMagic, 8)) {
        throw CheckpointError("not a CARERec1 checkpoint: " + path);
    }
    const std::uint32_t version = r.u32();
    if (version != kFormatVersion) {
        throw CheckpointError("checkpoint format version " + std::to_string(version) +
                              " unsupported; this build reads version " +
                              std::to_string(kFormatVersion));
    }

    RecConfig c;
    c.embed_dim = static_cast<int>(r.u32());
    c.layers = static_cast<int>(r.u32());
    c.heads = static_cast<int>(r.u32());
    c.max_sequence_length = static_cast<int>(r.u32());
    c.dropout = r.f32();
    c.learning_rate = r.f32();
    c.epochs = static_cast<int>(r.u32());
    c.batch_size = static_cast<int>(r.u32());
    c.seed = r.u64();
    const int item_count = static_cast<int>(r.u32());
    const int attribute_count = static_cast<int>(r.u32());

    corpus::EntityCatalog shape_catalog;
    shape_catalog.item_count = item_count;
    shape_catalog.attribute_count = attribute_count;
    shape_catalog.records.resize(static_cast<std::size_t>(item_count + attribute_count));
    RecModel model = init_model(shape_catalog, {}, c);

    std::vector<std::pair<std::string, Mat<float>*>> tensors;
    model.visit([&](const std::string& name, Mat<float>& m) { tensors.emplace_back(name, &m); });

    const std::uint32_t count = r.u32();
    if (count != tensors.size()) {
        throw CheckpointError("tensor count mismatch: file has " + std::to_string(count) +
                              ", model needs " + std::to_string(tensors.size()));
    }
    for (auto& [name, m] : tensors) {
        const std::uint16_t len = r.u16();
        const std::string fname = r.bytes(len);
        const std::uint32_t rows = r.u32();
        const std::uint32_t cols = r.u32();
        if (fname != name || static_cast<int>(rows) != m->rows || static_cast<int>(cols) != m->cols) {
            throw CheckpointError("manifest mismatch for tensor " + fname);
        }
    }
    for (auto& [name, m] : tensors) {
        const std::uint32_t expected_crc = r.u32();
        const std::string data = r.bytes(m->data.size() * 4);
        if (crc32(data.data(), data.size()) != expected_crc) {
            throw CheckpointError("checksum failure in tensor " + name);
        }
        Reader dr{data};
        for (auto& v : m->data) v = dr.f32();
    }
    if (r.pos != buf.size()) throw CheckpointError("trailing bytes after checkpoint data");
    return model;
}

template <class T>
bool all_finite(const ModelT<T>& model) {
    bool ok = true;
    model.visit([&](const std::string&, const Mat<T>& m) {
        for (T v : m.data) {
            if (!std::isfinite(v)) ok = false;
        }
    });
    return ok;
}

template std::vector<float> forward<float>(const ModelT<float>&, const std::vector<int>&, bool,
                                           Rng*, ForwardTrace<float>*);
template std::vector<double> forward<double>(const ModelT<double>&, const std::vector<int>&, bool,
                                             Rng*, ForwardTrace<double>*);
template float cross_entropy<float>(const std::vector<float>&, int, std::vector<float>*);
template double cross_entropy<double>(const std::vector<double>&, int, std::vector<double>*);
template void backward<float>(const ModelT<float>&, const ForwardTrace<float>&,
                              const std::vector<float>&, ModelT<float>&);
template void backward<double>(const ModelT<double>&, const ForwardTrace<double>&,
                               const std::vector<double>&, ModelT<double>&);
template ModelT<float> make_zero_like<float>(const ModelT<float>&);
template ModelT<double> make_zero_like<double>(const ModelT<double>&);
template bool all_finite<float>(const ModelT<float>&);
template bool all_finite<double>(const ModelT<double>&);

}  // namespace care::rec
