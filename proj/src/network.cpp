#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "recess/error.hpp"
#include "recess/model.hpp"
#include "recess/random.hpp"

namespace recess::model {

namespace {

struct Shape {
    int c = 0, h = 0, w = 0;
    std::size_t size() const { return static_cast<std::size_t>(c) * h * w; }
};

enum class OpKind { Conv, GroupNorm, Relu, AvgPool, Linear, Dropout };

struct Op {
    OpKind kind;
    Shape in, out;
    int k = 0, stride = 1, pad = 0;  // Conv
    int groups = 0;                  // GroupNorm
    double drop = 0.0;               // Dropout
    std::size_t w_off = 0, b_off = 0;
};

constexpr double kNormEps = 1e-5;

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using ColVec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

template <typename Real>
void im2col(const Real* in, const Shape& s, const Op& op, Real* col) {
    const int ho = op.out.h, wo = op.out.w;
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < s.c; ++c)
        for (int ky = 0; ky < op.k; ++ky)
            for (int kx = 0; kx < op.k; ++kx) {
                Real* dst = col + ((static_cast<std::size_t>(c) * op.k + ky) * op.k + kx) * plane;
                const Real* src = in + static_cast<std::size_t>(c) * s.h * s.w;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * op.stride + ky - op.pad;
                    Real* row = dst + static_cast<std::size_t>(oy) * wo;
                    if (iy < 0 || iy >= s.h) {
                        std::fill(row, row + wo, Real(0));
                        continue;
                    }
                    const Real* srow = src + static_cast<std::size_t>(iy) * s.w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * op.stride + kx - op.pad;
                        row[ox] = (ix >= 0 && ix < s.w) ? srow[ix] : Real(0);
                    }
                }
            }
}

template <typename Real>
void col2im(const Real* col, const Shape& s, const Op& op, Real* in) {
    const int ho = op.out.h, wo = op.out.w;
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < s.c; ++c)
        for (int ky = 0; ky < op.k; ++ky)
            for (int kx = 0; kx < op.k; ++kx) {
                const Real* src = col + ((static_cast<std::size_t>(c) * op.k + ky) * op.k + kx) * plane;
                Real* dst = in + static_cast<std::size_t>(c) * s.h * s.w;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * op.stride + ky - op.pad;
                    if (iy < 0 || iy >= s.h) continue;
                    const Real* row = src + static_cast<std::size_t>(oy) * wo;
                    Real* drow = dst + static_cast<std::size_t>(iy) * s.w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * op.stride + kx - op.pad;
                        if (ix >= 0 && ix < s.w) drow[ix] += row[ox];
                    }
                }
            }
}

std::pair<int, int> pool_range(int o, int n_out, int n_in) {
    const int lo = (o * n_in) / n_out;
    const int hi = ((o + 1) * n_in + n_out - 1) / n_out;
    return {lo, hi};
}

}  // namespace

/// Per-thread activations and scratch buffers for one image.
template <typename Real>
class Network<Real>::Workspace {
public:
    struct SeqState {
        std::vector<AlignedVector<Real>> act;   // act[i] is the input of op i
        std::vector<AlignedVector<Real>> aux;   // GroupNorm: xhat; Dropout: mask
        std::vector<AlignedVector<Real>> aux2;  // GroupNorm: inverse std per group
    };
    SeqState backbone, head, classifier;
    AlignedVector<Real> col, dcol, grad_a, grad_b, d_features;
    ClassProbs probs{0.0, 0.0};
    std::vector<double> logits;
    int grid = 0, anchors = 0, values = 0;
};

template <typename Real>
struct Network<Real>::Impl {
    std::vector<ParamSlot> slots;
    std::vector<Op> backbone, head, classifier;

    std::size_t add_param(const std::string& name, std::vector<int> shape) {
        std::size_t count = 1;
        for (int d : shape) count *= static_cast<std::size_t>(d);
        const std::size_t offset = slots.empty() ? 0 : slots.back().offset + slots.back().count;
        slots.push_back({name, std::move(shape), offset, count});
        return offset;
    }
    std::size_t total() const { return slots.empty() ? 0 : slots.back().offset + slots.back().count; }

    Shape conv(std::vector<Op>& seq, const std::string& name, Shape in, int out_c, int k, int stride) {
        Op op{OpKind::Conv, in, {}};
        op.k = k;
        op.stride = stride;
        op.pad = k / 2;
        op.out = {out_c, (in.h + 2 * op.pad - k) / stride + 1, (in.w + 2 * op.pad - k) / stride + 1};
        op.w_off = add_param(name + ".weight", {out_c, in.c, k, k});
        op.b_off = add_param(name + ".bias", {out_c});
        seq.push_back(op);
        return op.out;
    }
    Shape norm(std::vector<Op>& seq, const std::string& name, Shape in) {
        Op op{OpKind::GroupNorm, in, in};
        op.groups = std::gcd(in.c, 8);
        op.w_off = add_param(name + ".gamma", {in.c});
        op.b_off = add_param(name + ".beta", {in.c});
        seq.push_back(op);
        return in;
    }
    Shape relu(std::vector<Op>& seq, Shape in) {
        seq.push_back(Op{OpKind::Relu, in, in});
        return in;
    }
    Shape linear(std::vector<Op>& seq, const std::string& name, Shape in, int out) {
        Op op{OpKind::Linear, in, {out, 1, 1}};
        op.w_off = add_param(name + ".weight", {out, static_cast<int>(in.size())});
        op.b_off = add_param(name + ".bias", {out});
        seq.push_back(op);
        return op.out;
    }
};

namespace {

template <typename Real>
void forward_op(const Op& op, const Real* params, const Real* in, Real* out, AlignedVector<Real>& aux,
                AlignedVector<Real>& aux2, AlignedVector<Real>& col, bool training, Rng* rng) {
    switch (op.kind) {
        case OpKind::Conv: {
            const int kdim = op.in.c * op.k * op.k;
            const int hw = op.out.h * op.out.w;
            const Real* cptr = in;
            if (!(op.k == 1 && op.stride == 1)) {
                col.resize(static_cast<std::size_t>(kdim) * hw);
                im2col(in, op.in, op, col.data());
                cptr = col.data();
            }
            Eigen::Map<const RowMat<Real>> W(params + op.w_off, op.out.c, kdim);
            Eigen::Map<const RowMat<Real>> C(cptr, kdim, hw);
            Eigen::Map<RowMat<Real>> Y(out, op.out.c, hw);
            Eigen::Map<const ColVec<Real>> b(params + op.b_off, op.out.c);
            Y.noalias() = W * C;
            Y.colwise() += b;
            break;
        }
        case OpKind::GroupNorm: {
            const int cpg = op.in.c / op.groups;
            const std::size_t hw = static_cast<std::size_t>(op.in.h) * op.in.w;
            const std::size_t n = hw * cpg;
            aux.resize(op.in.size());
            aux2.resize(static_cast<std::size_t>(op.groups));
            for (int g = 0; g < op.groups; ++g) {
                const std::size_t base = static_cast<std::size_t>(g) * n;
                double mean = 0.0;
                for (std::size_t i = 0; i < n; ++i) mean += in[base + i];
                mean /= static_cast<double>(n);
                double var = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = in[base + i] - mean;
                    var += d * d;
                }
                var /= static_cast<double>(n);
                const double inv = 1.0 / std::sqrt(var + kNormEps);
                aux2[static_cast<std::size_t>(g)] = static_cast<Real>(inv);
                for (int cc = 0; cc < cpg; ++cc) {
                    const int c = g * cpg + cc;
                    const Real gamma = params[op.w_off + static_cast<std::size_t>(c)];
                    const Real beta = params[op.b_off + static_cast<std::size_t>(c)];
                    const std::size_t off = static_cast<std::size_t>(c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const Real xh = static_cast<Real>((in[off + i] - mean) * inv);
                        aux[off + i] = xh;
                        out[off + i] = gamma * xh + beta;
                    }
                }
            }
            break;
        }
        case OpKind::Relu: {
            const std::size_t n = op.in.size();
            for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > Real(0) ? in[i] : Real(0);
            break;
        }
        case OpKind::AvgPool: {
            for (int c = 0; c < op.in.c; ++c)
                for (int oy = 0; oy < op.out.h; ++oy) {
                    const auto [y0, y1] = pool_range(oy, op.out.h, op.in.h);
                    for (int ox = 0; ox < op.out.w; ++ox) {
                        const auto [x0, x1] = pool_range(ox, op.out.w, op.in.w);
                        double sum = 0.0;
                        for (int y = y0; y < y1; ++y)
                            for (int x = x0; x < x1; ++x)
                                sum += in[(static_cast<std::size_t>(c) * op.in.h + y) * op.in.w + x];
                        out[(static_cast<std::size_t>(c) * op.out.h + oy) * op.out.w + ox] =
                            static_cast<Real>(sum / ((y1 - y0) * (x1 - x0)));
                    }
                }
            break;
        }
        case OpKind::Linear: {
            const int n_in = static_cast<int>(op.in.size());
            Eigen::Map<const RowMat<Real>> W(params + op.w_off, op.out.c, n_in);
            Eigen::Map<const ColVec<Real>> x(in, n_in);
            Eigen::Map<const ColVec<Real>> b(params + op.b_off, op.out.c);
            Eigen::Map<ColVec<Real>> y(out, op.out.c);
            y.noalias() = W * x;
            y += b;
            break;
        }
        case OpKind::Dropout: {
            const std::size_t n = op.in.size();
            if (!training || op.drop <= 0.0) {
                std::copy(in, in + n, out);
                aux.clear();
                break;
            }
            aux.resize(n);
            const Real keep = static_cast<Real>(1.0 / (1.0 - op.drop));
            for (std::size_t i = 0; i < n; ++i) {
                aux[i] = rng->uniform() < op.drop ? Real(0) : keep;
                out[i] = in[i] * aux[i];
            }
            break;
        }
    }
}

/// Accumulates parameter gradients and writes dL/d(input) into d_in.
template <typename Real>
void backward_op(const Op& op, const Real* params, const Real* in, const Real* out, const Real* d_out,
                 Real* d_in, const AlignedVector<Real>& aux, const AlignedVector<Real>& aux2, AlignedVector<Real>& col,
                 AlignedVector<Real>& dcol, Real* grads, bool need_d_in) {
    switch (op.kind) {
        case OpKind::Conv: {
            const int kdim = op.in.c * op.k * op.k;
            const int hw = op.out.h * op.out.w;
            const bool direct = op.k == 1 && op.stride == 1;
            const Real* cptr = in;
            if (!direct) {
                col.resize(static_cast<std::size_t>(kdim) * hw);
                im2col(in, op.in, op, col.data());
                cptr = col.data();
            }
            Eigen::Map<const RowMat<Real>> W(params + op.w_off, op.out.c, kdim);
            Eigen::Map<const RowMat<Real>> C(cptr, kdim, hw);
            Eigen::Map<const RowMat<Real>> dY(d_out, op.out.c, hw);
            Eigen::Map<RowMat<Real>> dW(grads + op.w_off, op.out.c, kdim);
            Eigen::Map<ColVec<Real>> db(grads + op.b_off, op.out.c);
            dW.noalias() += dY * C.transpose();
            db += dY.rowwise().sum();
            if (!need_d_in) break;
            if (direct) {
                Eigen::Map<RowMat<Real>> dX(d_in, kdim, hw);
                dX.noalias() = W.transpose() * dY;
            } else {
                dcol.resize(static_cast<std::size_t>(kdim) * hw);
                Eigen::Map<RowMat<Real>> dC(dcol.data(), kdim, hw);
                dC.noalias() = W.transpose() * dY;
                std::fill(d_in, d_in + op.in.size(), Real(0));
                col2im(dcol.data(), op.in, op, d_in);
            }
            break;
        }
        case OpKind::GroupNorm: {
            const int cpg = op.in.c / op.groups;
            const std::size_t hw = static_cast<std::size_t>(op.in.h) * op.in.w;
            const std::size_t n = hw * cpg;
            for (int g = 0; g < op.groups; ++g) {
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int cc = 0; cc < cpg; ++cc) {
                    const int c = g * cpg + cc;
                    const Real gamma = params[op.w_off + static_cast<std::size_t>(c)];
                    const std::size_t off = static_cast<std::size_t>(c) * hw;
                    double dgamma = 0.0, dbeta = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const double dy = d_out[off + i];
                        const double xh = aux[off + i];
                        dgamma += dy * xh;
                        dbeta += dy;
                        sum_dxh += dy * gamma;
                        sum_dxh_xh += dy * gamma * xh;
                    }
                    grads[op.w_off + static_cast<std::size_t>(c)] += static_cast<Real>(dgamma);
                    grads[op.b_off + static_cast<std::size_t>(c)] += static_cast<Real>(dbeta);
                }
                if (!need_d_in) continue;
                const double inv = aux2[static_cast<std::size_t>(g)];
                const double nn = static_cast<double>(n);
                for (int cc = 0; cc < cpg; ++cc) {
                    const int c = g * cpg + cc;
                    const double gamma = params[op.w_off + static_cast<std::size_t>(c)];
                    const std::size_t off = static_cast<std::size_t>(c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const double dxh = d_out[off + i] * gamma;
                        d_in[off + i] = static_cast<Real>(inv / nn * (nn * dxh - sum_dxh - aux[off + i] * sum_dxh_xh));
                    }
                }
            }
            break;
        }
        case OpKind::Relu: {
            const std::size_t n = op.in.size();
            for (std::size_t i = 0; i < n; ++i) d_in[i] = out[i] > Real(0) ? d_out[i] : Real(0);
            break;
        }
        case OpKind::AvgPool: {
            std::fill(d_in, d_in + op.in.size(), Real(0));
            for (int c = 0; c < op.in.c; ++c)
                for (int oy = 0; oy < op.out.h; ++oy) {
                    const auto [y0, y1] = pool_range(oy, op.out.h, op.in.h);
                    for (int ox = 0; ox < op.out.w; ++ox) {
                        const auto [x0, x1] = pool_range(ox, op.out.w, op.in.w);
                        const Real g = d_out[(static_cast<std::size_t>(c) * op.out.h + oy) * op.out.w + ox] /
                                       static_cast<Real>((y1 - y0) * (x1 - x0));
                        for (int y = y0; y < y1; ++y)
                            for (int x = x0; x < x1; ++x)
                                d_in[(static_cast<std::size_t>(c) * op.in.h + y) * op.in.w + x] += g;
                    }
                }
            break;
        }
        case OpKind::Linear: {
            const int n_in = static_cast<int>(op.in.size());
            Eigen::Map<const RowMat<Real>> W(params + op.w_off, op.out.c, n_in);
            Eigen::Map<const ColVec<Real>> x(in, n_in);
            Eigen::Map<const ColVec<Real>> dy(d_out, op.out.c);
            Eigen::Map<RowMat<Real>> dW(grads + op.w_off, op.out.c, n_in);
            Eigen::Map<ColVec<Real>> db(grads + op.b_off, op.out.c);
            dW.noalias() += dy * x.transpose();
            db += dy;
            if (need_d_in) {
                Eigen::Map<ColVec<Real>> dx(d_in, n_in);
                dx.noalias() = W.transpose() * dy;
            }
            break;
        }
        case OpKind::Dropout: {
            const std::size_t n = op.in.size();
            if (aux.empty()) std::copy(d_out, d_out + n, d_in);
            else
                for (std::size_t i = 0; i < n; ++i) d_in[i] = d_out[i] * aux[i];
            break;
        }
    }
}

template <typename Real>
void run_forward(const std::vector<Op>& seq, const Real* params, typename Network<Real>::Workspace::SeqState& st,
                 AlignedVector<Real>& col, bool training, Rng* rng) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
        st.act[i + 1].resize(seq[i].out.size());
        forward_op(seq[i], params, st.act[i].data(), st.act[i + 1].data(), st.aux[i], st.aux2[i], col, training, rng);
    }
}

/// d_out holds dL/d(last activation); on return d_out holds dL/d(first activation)
/// when need_input_grad is set.
template <typename Real>
void run_backward(const std::vector<Op>& seq, const Real* params, typename Network<Real>::Workspace::SeqState& st,
                  AlignedVector<Real>& d_out, AlignedVector<Real>& scratch, AlignedVector<Real>& col,
                  AlignedVector<Real>& dcol, Real* grads, bool need_input_grad) {
    for (std::size_t i = seq.size(); i-- > 0;) {
        const bool need = need_input_grad || i > 0;
        scratch.resize(seq[i].in.size());
        backward_op(seq[i], params, st.act[i].data(), st.act[i + 1].data(), d_out.data(), scratch.data(), st.aux[i],
                    st.aux2[i], col, dcol, grads, need);
        if (!need) return;
        std::swap(d_out, scratch);
    }
}

template <typename Real>
void init_state(typename Network<Real>::Workspace::SeqState& st, std::size_t n_ops) {
    st.act.assign(n_ops + 1, {});
    st.aux.assign(n_ops, {});
    st.aux2.assign(n_ops, {});
}

}  // namespace

template <typename Real>
Network<Real>::Network(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), impl_(std::make_unique<Impl>()) {
    cfg_.validate();
    Impl& m = *impl_;

    Shape s{1, cfg_.input_size, cfg_.input_size};
    for (std::size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
        const std::string p = "backbone.stage" + std::to_string(i);
        const int c = cfg_.backbone_channels[i];
        s = m.conv(m.backbone, p + ".conv0", s, c, 3, 2);
        s = m.norm(m.backbone, p + ".norm0", s);
        s = m.relu(m.backbone, s);
        s = m.conv(m.backbone, p + ".conv1", s, c, 3, 1);
        s = m.norm(m.backbone, p + ".norm1", s);
        s = m.relu(m.backbone, s);
    }
    const Shape features = s;

    Shape h = m.conv(m.head, "head.conv", features, features.c, 3, 1);
    h = m.relu(m.head, h);
    m.conv(m.head, "head.pred", h, cfg_.anchors_per_cell * cfg_.values_per_anchor(), 1, 1);

    if (cfg_.has_classifier()) {
        Op pool{OpKind::AvgPool, features, {features.c, cfg_.pooled_size[0], cfg_.pooled_size[1]}};
        m.classifier.push_back(pool);
        Shape c = m.linear(m.classifier, "classifier.fc0", pool.out, cfg_.classifier_hidden[0]);
        c = m.relu(m.classifier, c);
        Op drop{OpKind::Dropout, c, c};
        drop.drop = cfg_.dropout_rate;
        m.classifier.push_back(drop);
        c = m.linear(m.classifier, "classifier.fc1", c, cfg_.classifier_hidden[1]);
        c = m.relu(m.classifier, c);
        m.linear(m.classifier, "classifier.fc2", c, 2);
    }

    weights_.assign(m.total(), Real(0));
    Rng rng(Rng::mix(seed, 0x1417));
    const double obj_prior = 1.0 / (static_cast<double>(cfg_.grid_size) * cfg_.grid_size * cfg_.anchors_per_cell);
    for (const auto& slot : m.slots) {
        Real* w = weights_.data() + slot.offset;
        const bool is_weight = slot.name.ends_with(".weight");
        if (slot.name.ends_with(".gamma")) {
            std::fill(w, w + slot.count, Real(1));
        } else if (is_weight) {
            const double fan_in = static_cast<double>(slot.count) / slot.shape[0];
            const double std = slot.name == "head.pred.weight" ? 0.01 : std::sqrt(2.0 / fan_in);
            for (std::size_t i = 0; i < slot.count; ++i) w[i] = static_cast<Real>(std * rng.normal());
        } else if (slot.name == "head.pred.bias") {
            const int v = cfg_.values_per_anchor();
            for (int a = 0; a < cfg_.anchors_per_cell; ++a)
                w[a * v + 4] = static_cast<Real>(std::log(obj_prior / (1.0 - obj_prior)));
        }
    }
}

template <typename Real>
Network<Real>::~Network() = default;

template <typename Real>
Network<Real>::Network(const Network& o) : cfg_(o.cfg_), weights_(o.weights_), impl_(std::make_unique<Impl>(*o.impl_)) {}

template <typename Real>
Network<Real>& Network<Real>::operator=(const Network& o) {
    if (this != &o) {
        cfg_ = o.cfg_;
        weights_ = o.weights_;
        impl_ = std::make_unique<Impl>(*o.impl_);
    }
    return *this;
}

template <typename Real>
Network<Real>::Network(Network&&) noexcept = default;
template <typename Real>
Network<Real>& Network<Real>::operator=(Network&&) noexcept = default;

template <typename Real>
const std::vector<ParamSlot>& Network<Real>::slots() const noexcept {
    return impl_->slots;
}

template <typename Real>
void Network<Real>::zero_weights() {
    std::fill(weights_.begin(), weights_.end(), Real(0));
}

template <typename Real>
void Network<Real>::WorkspaceDeleter::operator()(Workspace* ws) const noexcept {
    delete ws;
}

template <typename Real>
typename Network<Real>::WorkspacePtr Network<Real>::make_workspace() const {
    WorkspacePtr ws(new Workspace);
    init_state<Real>(ws->backbone, impl_->backbone.size());
    init_state<Real>(ws->head, impl_->head.size());
    init_state<Real>(ws->classifier, impl_->classifier.size());
    ws->grid = cfg_.grid_size;
    ws->anchors = cfg_.anchors_per_cell;
    ws->values = cfg_.values_per_anchor();
    return ws;
}

template <typename Real>
void Network<Real>::forward(std::span<const float> image, Workspace& ws, bool training,
                            std::uint64_t dropout_seed) const {
    const std::size_t n = static_cast<std::size_t>(cfg_.input_size) * cfg_.input_size;
    if (image.size() != n)
        throw ShapeError("expected a " + std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.input_size) +
                         " image");
    const Impl& m = *impl_;
    const Real* p = weights_.data();

    auto& in = ws.backbone.act[0];
    in.resize(n);
    std::transform(image.begin(), image.end(), in.begin(), [](float v) { return static_cast<Real>(v); });
    run_forward<Real>(m.backbone, p, ws.backbone, ws.col, training, nullptr);

    ws.head.act[0] = ws.backbone.act.back();
    run_forward<Real>(m.head, p, ws.head, ws.col, training, nullptr);

    if (cfg_.has_classifier()) {
        Rng rng(dropout_seed);
        ws.classifier.act[0] = ws.backbone.act.back();
        run_forward<Real>(m.classifier, p, ws.classifier, ws.col, training, &rng);
        const auto& z = ws.classifier.act.back();
        const double z0 = z[0], z1 = z[1];
        const double mx = std::max(z0, z1);
        const double e0 = std::exp(z0 - mx), e1 = std::exp(z1 - mx);
        ws.probs = {e0 / (e0 + e1), e1 / (e0 + e1)};
        ws.logits = {z0, z1};
    } else {
        ws.probs = {0.0, 0.0};
    }
}

template <typename Real>
RawPrediction Network<Real>::raw_of(const Workspace& ws) {
    RawPrediction raw(1, ws.grid, ws.anchors, ws.values);
    const auto& h = ws.head.act.back();
    const int s = ws.grid;
    for (int a = 0; a < ws.anchors; ++a)
        for (int k = 0; k < ws.values; ++k)
            for (int row = 0; row < s; ++row)
                for (int col = 0; col < s; ++col)
                    raw.at(0, row, col, a, k) =
                        h[((static_cast<std::size_t>(a) * ws.values + k) * s + row) * s + col];
    return raw;
}

template <typename Real>
ClassProbs Network<Real>::probs_of(const Workspace& ws) {
    return ws.probs;
}

template <typename Real>
void Network<Real>::backward(Workspace& ws, std::span<const double> d_raw, std::span<const double> d_probs,
                             std::span<Real> grads) const {
    if (grads.size() != weights_.size()) throw ShapeError("gradient buffer does not match the network");
    const Impl& m = *impl_;
    const Real* p = weights_.data();
    const int s = ws.grid;

    // Raw layout (S, S, A, V) back to channel-major head output (A*V, S, S).
    auto& dh = ws.grad_a;
    dh.assign(ws.head.act.back().size(), Real(0));
    for (int row = 0; row < s; ++row)
        for (int col = 0; col < s; ++col)
            for (int a = 0; a < ws.anchors; ++a)
                for (int k = 0; k < ws.values; ++k)
                    dh[((static_cast<std::size_t>(a) * ws.values + k) * s + row) * s + col] = static_cast<Real>(
                        d_raw[((static_cast<std::size_t>(row) * s + col) * ws.anchors + a) * ws.values + k]);
    run_backward<Real>(m.head, p, ws.head, dh, ws.grad_b, ws.col, ws.dcol, grads.data(), true);
    ws.d_features = dh;

    if (cfg_.has_classifier() && !d_probs.empty()) {
        // Softmax Jacobian: dL/dz_i = p_i (dL/dp_i - sum_j p_j dL/dp_j).
        const double dot = ws.probs[0] * d_probs[0] + ws.probs[1] * d_probs[1];
        auto& dz = ws.grad_a;
        dz = {static_cast<Real>(ws.probs[0] * (d_probs[0] - dot)), static_cast<Real>(ws.probs[1] * (d_probs[1] - dot))};
        run_backward<Real>(m.classifier, p, ws.classifier, dz, ws.grad_b, ws.col, ws.dcol, grads.data(), true);
        for (std::size_t i = 0; i < ws.d_features.size(); ++i) ws.d_features[i] += dz[i];
    }
    run_backward<Real>(m.backbone, p, ws.backbone, ws.d_features, ws.grad_b, ws.col, ws.dcol, grads.data(), false);
}

template <typename Real>
FeatureMaps Network<Real>::backbone_forward(const std::vector<GrayImage>& images) const {
    FeatureMaps f;
    f.batch = static_cast<int>(images.size());
    f.channels = cfg_.backbone_channels.back();
    f.size = cfg_.grid_size;
    auto ws = make_workspace();
    for (const auto& img : images) {
        if (img.width() != cfg_.input_size || img.height() != cfg_.input_size)
            throw ShapeError("expected " + std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.input_size) +
                             " input, got " + std::to_string(img.width()) + "x" + std::to_string(img.height()));
        auto& in = ws->backbone.act[0];
        in.assign(img.pixels().begin(), img.pixels().end());
        run_forward<Real>(impl_->backbone, weights_.data(), ws->backbone, ws->col, false, nullptr);
        const auto& out = ws->backbone.act.back();
        f.data.insert(f.data.end(), out.begin(), out.end());
    }
    return f;
}

template <typename Real>
RawPrediction Network<Real>::detection_head_forward(const FeatureMaps& features) const {
    if (features.channels != cfg_.backbone_channels.back() || features.size != cfg_.grid_size)
        throw ShapeError("feature maps do not match the model configuration");
    RawPrediction raw(features.batch, cfg_.grid_size, cfg_.anchors_per_cell, cfg_.values_per_anchor());
    auto ws = make_workspace();
    const std::size_t per = static_cast<std::size_t>(features.channels) * features.size * features.size;
    for (int b = 0; b < features.batch; ++b) {
        ws->head.act[0].assign(features.data.begin() + static_cast<std::ptrdiff_t>(b * per),
                               features.data.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
        run_forward<Real>(impl_->head, weights_.data(), ws->head, ws->col, false, nullptr);
        const RawPrediction one = raw_of(*ws);
        std::copy(one.data.begin(), one.data.end(), raw.data.begin() + static_cast<std::ptrdiff_t>(b * one.per_image()));
    }
    return raw;
}

template <typename Real>
std::vector<ClassProbs> Network<Real>::classifier_forward(const FeatureMaps& features, bool training,
                                                          std::uint64_t dropout_seed) const {
    if (!cfg_.has_classifier()) throw ModeError("classifier branch exists only in MultiTask mode");
    if (features.channels != cfg_.backbone_channels.back() || features.size != cfg_.grid_size)
        throw ShapeError("feature maps do not match the model configuration");
    std::vector<ClassProbs> out;
    auto ws = make_workspace();
    const std::size_t per = static_cast<std::size_t>(features.channels) * features.size * features.size;
    for (int b = 0; b < features.batch; ++b) {
        ws->classifier.act[0].assign(features.data.begin() + static_cast<std::ptrdiff_t>(b * per),
                                     features.data.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
        Rng rng(Rng::mix(dropout_seed, static_cast<std::uint64_t>(b)));
        run_forward<Real>(impl_->classifier, weights_.data(), ws->classifier, ws->col, training, &rng);
        const auto& z = ws->classifier.act.back();
        const double mx = std::max<double>(z[0], z[1]);
        const double e0 = std::exp(z[0] - mx), e1 = std::exp(z[1] - mx);
        out.push_back({e0 / (e0 + e1), e1 / (e0 + e1)});
    }
    return out;
}

template <typename Real>
std::pair<RawPrediction, ClassProbs> Network<Real>::predict(const GrayImage& image) const {
    if (image.width() != cfg_.input_size || image.height() != cfg_.input_size)
        throw ShapeError("expected " + std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.input_size) +
                         " input, got " + std::to_string(image.width()) + "x" + std::to_string(image.height()));
    auto ws = make_workspace();
    forward(image.pixels(), *ws, false, 0);
    return {raw_of(*ws), ws->probs};
}

template class Network<float>;
template class Network<double>;

}  // namespace recess::model
