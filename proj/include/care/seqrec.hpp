#pragma once
// Entity-level sequential recommender: summed graph-smoothed + positional
// embeddings, a stack of pre-norm multi-head self-attention blocks, and a
// two-layer GELU head projecting the [MASK] hidden state onto item scores.
// Trained with a cloze objective (final item replaced by [MASK]) using plain
// SGD. Forward/backward are hand-rolled; a double-precision instantiation
// exists for finite-difference gradient checking.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "care/corpus.hpp"
#include "care/linker.hpp"
#include "care/rng.hpp"

namespace care::rec {

template <class T>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, T{}) {}

    T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    T* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
    const T* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
    void zero() { std::fill(data.begin(), data.end(), T{}); }
    std::size_t size() const { return data.size(); }
};

struct RecConfig {
    int embed_dim = 64;
    int layers = 2;
    int heads = 2;
    int max_sequence_length = 50;
    float dropout = 0.2f;
    float learning_rate = 5e-3f;
    int epochs = 30;
    int batch_size = 32;
    std::uint64_t seed = 42;

    void validate() const;
};

template <class T>
struct BlockParams {
    Mat<T> ln1_gain, ln1_bias;
    Mat<T> wq, bq, wk, bk, wv, bv;
    Mat<T> wo, bo;
    Mat<T> ln2_gain, ln2_bias;
    Mat<T> wf1, bf1;  // d -> 4d
    Mat<T> wf2, bf2;  // 4d -> d
};

// All learned parameters. The same struct doubles as the gradient container.
template <class T>
struct ModelT {
    RecConfig config;
    int item_count = 0;
    int attribute_count = 0;

    Mat<T> entity_emb;  // (vocab+1, d); final row is [MASK]
    Mat<T> pos_emb;     // (max_sequence_length+1, d)
    std::vector<BlockParams<T>> blocks;
    Mat<T> lnf_gain, lnf_bias;  // final layer norm after the pre-norm stack
    Mat<T> w1, b1;  // head layer 1: d -> d
    Mat<T> w2, b2;  // head layer 2: d -> item_count

    int vocab() const { return item_count + attribute_count; }
    int mask_id() const { return vocab(); }

    // Applies f(name, tensor) to every parameter tensor in declared order.
    // This order is the checkpoint tensor order.
    template <class F>
    void visit(F&& f) {
        f("entity_emb", entity_emb);
        f("pos_emb", pos_emb);
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            const std::string p = "block" + std::to_string(l) + ".";
            BlockParams<T>& blk = blocks[l];
            f(p + "ln1_gain", blk.ln1_gain);
            f(p + "ln1_bias", blk.ln1_bias);
            f(p + "wq", blk.wq);
            f(p + "bq", blk.bq);
            f(p + "wk", blk.wk);
            f(p + "bk", blk.bk);
            f(p + "wv", blk.wv);
            f(p + "bv", blk.bv);
            f(p + "wo", blk.wo);
            f(p + "bo", blk.bo);
            f(p + "ln2_gain", blk.ln2_gain);
            f(p + "ln2_bias", blk.ln2_bias);
            f(p + "wf1", blk.wf1);
            f(p + "bf1", blk.bf1);
            f(p + "wf2", blk.wf2);
            f(p + "bf2", blk.bf2);
        }
        f("lnf_gain", lnf_gain);
        f("lnf_bias", lnf_bias);
        f("head_w1", w1);
        f("head_b1", b1);
        f("head_w2", w2);
        f("head_b2", b2);
    }

    template <class F>
    void visit(F&& f) const {
        const_cast<ModelT*>(this)->visit(
            [&](const std::string& name, Mat<T>& m) { f(name, static_cast<const Mat<T>&>(m)); });
    }
};

using RecModel = ModelT<float>;

// Per-layer activations retained for backprop and inspection.
template <class T>
struct ForwardTrace {
    struct Block {
        Mat<T> ln1_out, ln1_xhat;
        std::vector<T> ln1_inv_std;
        Mat<T> q, k, v;
        std::vector<Mat<T>> attn;  // one (n, n) matrix per head; rows sum to 1
        Mat<T> z;                  // concatenated head outputs
        Mat<T> attn_drop;          // dropout scale applied to the attention output
        Mat<T> x_mid;              // after the attention residual
        Mat<T> ln2_out, ln2_xhat;
        std::vector<T> ln2_inv_std;
        Mat<T> ff_pre, ff_act;
        Mat<T> ff_drop;
        Mat<T> x_out;
    };

    std::vector<int> input_ids;
    int mask_pos = 0;
    Mat<T> x0;  // embedded input after dropout
    Mat<T> emb_drop;
    std::vector<Block> blocks;
    Mat<T> lnf_xhat;
    std::vector<T> lnf_inv_std;
    Mat<T> hidden;  // H, the final sequential representation
    std::vector<T> head_pre;  // W1 layer pre-activation at the mask position
    std::vector<T> head_act;
};

struct CandidateSet {
    struct Entry {
        int item_id = 0;
        float score = 0.0f;
    };
    std::vector<Entry> entries;  // descending score, ties by lower id
    int k = 0;

    std::vector<int> ids() const;
};

struct MaskedExample {
    std::vector<int> input_ids;  // original sequence with the final entry = [MASK]
    int label = 0;               // the replaced item id
};

// Base vectors from a seeded Gaussian (mean 0, std 0.02); every entity with
// KG neighbors is smoothed to 0.5*self + 0.5*mean(neighbors) in one pass over
// the base table. The [MASK] row stays zero. Relation ids are ignored.
Mat<float> graph_smoothed_init(const corpus::EntityCatalog& catalog,
                               const std::vector<corpus::KGTriple>& triples,
                               const RecConfig& config);

// Fresh model: graph-smoothed entity table, Gaussian weights, unit layer-norm
// gains. Deterministic for a fixed config.seed.
RecModel init_model(const corpus::EntityCatalog& catalog,
                    const std::vector<corpus::KGTriple>& triples, const RecConfig& config);

// Replaces the final entry by [MASK]. The sequence must have length >= 2 and
// end with an item id (callers pre-filter, see train).
MaskedExample mask_last(const linker::EntitySequence& seq, int item_count, int mask_id);

// Scores over all items from the hidden state at the [MASK] position.
// Dropout is active only when training (rng required then). The trace is
// filled when non-null and is required for backward().
template <class T>
std::vector<T> forward(const ModelT<T>& model, const std::vector<int>& input_ids, bool training,
                       Rng* dropout_rng = nullptr, ForwardTrace<T>* trace = nullptr);

// Cross-entropy of softmax(scores) against the label. When dscores is
// non-null it receives softmax(scores) - onehot(label).
template <class T>
T cross_entropy(const std::vector<T>& scores, int label, std::vector<T>* dscores);

// Accumulates parameter gradients into `grads` (a zero-initialized model of
// identical shape).
template <class T>
void backward(const ModelT<T>& model, const ForwardTrace<T>& trace,
              const std::vector<T>& dscores, ModelT<T>& grads);

template <class T>
ModelT<T> make_zero_like(const ModelT<T>& model);

ModelT<double> widen(const RecModel& model);

struct TrainResult {
    std::vector<double> epoch_losses;  // mean cloze loss per epoch
    std::size_t sequences_used = 0;
    std::size_t sequences_discarded = 0;
};

// Cloze training: each sequence is trimmed to its last item mention, short
// sequences are discarded, the final item is masked and predicted. Plain SGD
// with global-norm gradient clipping at 5.0. Deterministic for a fixed seed.
TrainResult train(RecModel& model, const std::vector<linker::EntitySequence>& sequences,
                  const RecConfig& config);

// Appends [MASK], runs inference-mode forward, returns the top-k items by
// score (ties to the lower id). k is clamped to item_count.
CandidateSet recommend(const RecModel& model, const linker::EntitySequence& seq, int k);

struct GradCheckResult {
    double max_rel_error = 0.0;
    int coords_checked = 0;
    std::string worst_tensor;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central finite differences against analytic gradients on >= min_coords
// sampled coordinates spanning every parameter tensor. Dropout disabled.
// Relative error uses an absolute floor of 1e-8.
GradCheckResult gradient_check(ModelT<double>& model, const linker::EntitySequence& example,
                               double epsilon, int min_coords, std::uint64_t seed);

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Binary checkpoint: magic "CARERec1", format version, config block, tensor
// manifest (names and shapes), then CRC-checksummed little-endian float32
// tensors in manifest order.
void save_checkpoint(const RecModel& model, const std::string& path);
RecModel load_checkpoint(const std::string& path);

template <class T>
bool all_finite(const ModelT<T>& model);

}  // namespace care::rec
