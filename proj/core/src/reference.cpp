#include "convneur/reference.hpp"

#include "convneur/error.hpp"

#include <cmath>
#include <vector>

namespace convneur::reference {

Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding) {
    const long c = static_cast<long>(x.dim(0)), h = static_cast<long>(x.dim(1)), w = static_cast<long>(x.dim(2));
    const long k = static_cast<long>(kernel.dim(1));
    const long s = static_cast<long>(stride), p = static_cast<long>(padding);
    const long oh = (h + 2 * p - k) / s + 1, ow = (w + 2 * p - k) / s + 1;
    Tensor out({static_cast<std::size_t>(c), static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
    for (long ch = 0; ch < c; ++ch) {
        for (long oy = 0; oy < oh; ++oy) {
            for (long ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (long ky = 0; ky < k; ++ky) {
                    for (long kx = 0; kx < k; ++kx) {
                        const long iy = oy * s + ky - p, ix = ox * s + kx - p;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                            acc += kernel.at(ch, ky, kx) * x.at(ch, iy, ix);
                        }
                    }
                }
                out.at(ch, oy, ox) = acc;
            }
        }
    }
    return out;
}

Tensor pointwise_conv(const Tensor& x, const Tensor& weight) {
    const std::size_t cout = weight.dim(0), cin = weight.dim(1), h = x.dim(1), w = x.dim(2);
    Tensor out({cout, h, w});
    for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t xx = 0; xx < w; ++xx) {
                double acc = 0.0;
                for (std::size_t i = 0; i < cin; ++i) {
                    acc += weight.at(o, i) * x.at(i, y, xx);
                }
                out.at(o, y, xx) = acc;
            }
        }
    }
    return out;
}

namespace {

using Matrix = std::vector<std::vector<double>>;

Matrix zeros(std::size_t r, std::size_t c) { return Matrix(r, std::vector<double>(c, 0.0)); }

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double softplus(double z) { return z > 30.0 ? z : std::log(1.0 + std::exp(z)); }

// w is stored as a [1, n] tensor
double affine(const Tensor& w, const Tensor& b, const std::vector<double>& input) {
    double acc = b[0];
    for (std::size_t i = 0; i < input.size(); ++i) {
        acc += w[i] * input[i];
    }
    return acc;
}

}  // namespace

Tensor memory_rollout(const Tensor& x, const MemoryParams& params, const MemoryConfig& config) {
    const std::size_t channels = x.dim(0), height = x.dim(1), width = x.dim(2);
    const std::size_t cm = config.c_mem, heads = config.heads, d = cm / heads, len = config.chunk_len;
    const std::size_t tokens = height * width;

    // Bottleneck into raster-ordered tokens: seq[token][channel].
    Matrix seq = zeros(tokens, cm);
    for (std::size_t p = 0; p < tokens; ++p) {
        for (std::size_t m = 0; m < cm; ++m) {
            double acc = 0.0;
            for (std::size_t c = 0; c < channels; ++c) {
                acc += params.proj_in.at(m, c) * x[c * tokens + p];
            }
            seq[p][m] = acc;
        }
    }

    // Memory per head: fast[h][i][j], mom[h][i][j].
    std::vector<Matrix> fast(heads, zeros(d, d)), mom(heads, zeros(d, d));
    Matrix retrieved = zeros(tokens, cm);

    for (std::size_t start = 0; start < tokens; start += len) {
        const std::size_t rows = std::min(len, tokens - start);
        Matrix q = zeros(rows, cm), k = zeros(rows, cm), v = zeros(rows, cm);
        for (std::size_t r = 0; r < rows; ++r) {
            const auto& s = seq[start + r];
            for (std::size_t i = 0; i < cm; ++i) {
                double aq = 0.0, ak = 0.0, av = 0.0;
                for (std::size_t j = 0; j < cm; ++j) {
                    aq += params.w_q.at(i, j) * s[j];
                    ak += params.w_k.at(i, j) * s[j];
                    av += params.w_v.at(i, j) * s[j];
                }
                q[r][i] = aq;
                k[r][i] = ak;
                v[r][i] = av;
            }
        }

        // Read with the previous state.
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t h = 0; h < heads; ++h) {
                for (std::size_t j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < d; ++i) {
                        acc += q[r][h * d + i] * fast[h][i][j];
                    }
                    retrieved[start + r][h * d + j] = acc;
                }
            }
        }

        // Reconstruction loss and its gradient in the fast weights.
        double loss = 0.0;
        std::vector<Matrix> grad(heads, zeros(d, d));
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t r = 0; r < rows; ++r) {
                std::vector<double> resid(d);
                for (std::size_t j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < d; ++i) {
                        acc += k[r][h * d + i] * fast[h][i][j];
                    }
                    resid[j] = acc - v[r][h * d + j];
                    loss += resid[j] * resid[j];
                }
                for (std::size_t i = 0; i < d; ++i) {
                    for (std::size_t j = 0; j < d; ++j) {
                        grad[h][i][j] += 2.0 * k[r][h * d + i] * resid[j];
                    }
                }
            }
        }

        std::vector<double> features(cm + 1, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t m = 0; m < cm; ++m) {
                features[m] += seq[start + r][m] / static_cast<double>(rows);
            }
        }
        features[cm] = loss;
        double theta = config.base_step * softplus(affine(params.gen_step_w, params.gen_step_b, features));
        double eta = sigmoid(affine(params.gen_momentum_w, params.gen_momentum_b, features));
        double alpha = sigmoid(affine(params.gen_decay_w, params.gen_decay_b, features));
        if (config.force.step) {
            theta = *config.force.step;
        }
        if (config.force.momentum) {
            eta = *config.force.momentum;
        }
        if (config.force.decay) {
            alpha = *config.force.decay;
        }

        for (std::size_t h = 0; h < heads; ++h) {
            double norm_sq = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    mom[h][i][j] = eta * mom[h][i][j] - theta * grad[h][i][j];
                    fast[h][i][j] = (1.0 - alpha) * fast[h][i][j] + mom[h][i][j];
                    norm_sq += fast[h][i][j] * fast[h][i][j];
                }
            }
            const double norm = std::sqrt(norm_sq);
            if (norm > config.norm_cap) {
                for (auto& row : fast[h]) {
                    for (double& value : row) {
                        value *= config.norm_cap / norm;
                    }
                }
            }
        }
    }

    Tensor g({channels, height, width});
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t p = 0; p < tokens; ++p) {
            double acc = 0.0;
            for (std::size_t m = 0; m < cm; ++m) {
                acc += params.proj_out.at(c, m) * retrieved[p][m];
            }
            g[c * tokens + p] = acc;
        }
    }
    return g;
}

}  // namespace convneur::reference
