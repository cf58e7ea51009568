#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gxe/data.hpp"
#include "gxe/fa.hpp"
#include "gxe/rng.hpp"

namespace gxe {

enum class Act { Relu, Sigmoid };

struct LayerSpec {
  int width = 0;
  Act act = Act::Relu;
};

struct MLPSpec {
  int input_dim = 0;
  std::vector<LayerSpec> hidden;
  bool layer_norm = true;
  double dropout_rate = 0.5;
  bool scalar_output = true;
};

// hidden widths [w, w/2] with a sigmoid final hidden layer
MLPSpec genotype_encoder_spec(int d_g, int first_width = 256);
// n_layers hidden layers of `width`, final one halved with sigmoid
MLPSpec env_encoder_spec(int d_e, int width = 48, int n_layers = 3);

// Multilayer perceptron with a single flat parameter vector. Layer order per
// hidden layer: affine, layer norm, activation, dropout; linear scalar head.
class Mlp {
 public:
  MLPSpec spec;
  Eigen::VectorXd theta;

  static Mlp build(const MLPSpec& spec, std::uint64_t init_seed);

  int n_params() const { return static_cast<int>(theta.size()); }
  int embedding_dim() const { return spec.hidden.empty() ? spec.input_dim : spec.hidden.back().width; }

  struct Cache {
    std::vector<Eigen::VectorXd> a;     // post-layer activations, a[0] unused
    std::vector<Eigen::VectorXd> z;     // affine outputs
    std::vector<Eigen::VectorXd> xhat;  // normalized values (layer norm)
    std::vector<double> inv_sd;
    std::vector<Eigen::VectorXd> h;     // pre-activation values
    std::vector<Eigen::VectorXd> mask;  // dropout masks (training)
  };

  double forward_scalar(const Eigen::VectorXd& x, bool training, Rng* rng,
                        Cache* cache = nullptr) const;
  Eigen::VectorXd forward_embed(const Eigen::VectorXd& x, bool training, Rng* rng,
                                Cache* cache = nullptr) const;

  // accumulate parameter gradients; returns nothing / input gradient resp.
  void backward_scalar(const Eigen::VectorXd& x, const Cache& cache, double d_out,
                       Eigen::VectorXd& grad) const;
  void backward_embed(const Eigen::VectorXd& x, const Cache& cache,
                      const Eigen::VectorXd& d_emb, Eigen::VectorXd& grad) const;

  struct LayerOffsets {
    int w = 0, b = 0, gamma = -1, beta = -1;
    int in = 0, out = 0;
  };
  std::vector<LayerOffsets> offsets;
  int head_w = -1, head_b = -1;

 private:
  Eigen::VectorXd run(const Eigen::VectorXd& x, bool training, Rng* rng, Cache* cache,
                      bool want_scalar, double* scalar_out) const;
};

struct TwoTower {
  Mlp tower_g;
  Mlp tower_e;
  int embedding_len = 8;
  Eigen::VectorXd proj_theta;  // [Wg (8 x emb_g), bg, We (8 x emb_e), be]

  static TwoTower build(const Mlp& trained_fg, const Mlp& trained_fe, int embedding_len,
                        std::uint64_t init_seed);

  double forward(const Eigen::VectorXd& xg, const Eigen::VectorXd& xe, bool training,
                 Rng* rng, Mlp::Cache* cg = nullptr, Mlp::Cache* ce = nullptr,
                 Eigen::VectorXd* emb_g = nullptr, Eigen::VectorXd* emb_e = nullptr) const;

  void backward(const Eigen::VectorXd& xg, const Eigen::VectorXd& xe, const Mlp::Cache& cg,
                const Mlp::Cache& ce, const Eigen::VectorXd& emb_g,
                const Eigen::VectorXd& emb_e, double d_out, Eigen::VectorXd& grad_g,
                Eigen::VectorXd& grad_e, Eigen::VectorXd& grad_proj) const;
};

enum class Optimizer { AdamW, Gd };

struct TrainConfig {
  int epochs = 250;
  int batch_size = 256;
  double learning_rate = 1e-3;
  double weight_decay = 3e-4;
  Optimizer optimizer = Optimizer::AdamW;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TraceRow {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;  // NaN when no validation set
};

std::vector<TraceRow> train_component(Mlp& m, const Eigen::MatrixXd& x,
                                      const Eigen::VectorXd& y, const TrainConfig& cfg,
                                      const Eigen::MatrixXd* x_val = nullptr,
                                      const Eigen::VectorXd* y_val = nullptr);

// pair samples index rows of the genotype / environment feature matrices
struct PairData {
  const Eigen::MatrixXd* xg = nullptr;
  const Eigen::MatrixXd* xe = nullptr;
  std::vector<std::pair<int, int>> pairs;
  Eigen::VectorXd targets;
};

std::vector<TraceRow> train_two_tower(TwoTower& tt, const PairData& data,
                                      const TrainConfig& cfg, const PairData* val = nullptr);

struct StructuredConfig {
  MLPSpec genotype_spec;
  MLPSpec env_spec;
  TrainConfig fg;
  TrainConfig fe;
  TrainConfig fge;
  int embedding_len = 8;
  std::uint64_t seed = 0;
};

// paper defaults from the implementation details; `desk` quarters the widths
// and halves the epochs for fast tests
StructuredConfig default_structured_config(int d_g, int d_e, const std::string& profile,
                                           std::uint64_t seed);

struct MixinnModel {
  Mlp f_g;
  Mlp f_e;
  TwoTower f_ge;
  double mu_hat = 0.0;
};

// Stage 1 trains f_g on y_g and f_e on y_e; stage 2 initializes the two-tower
// network from the trained encoders and trains on y_ge over observed cells.
MixinnModel structured_fit(const Dataset& d, const LabelSets& labels,
                           const StructuredConfig& cfg,
                           std::vector<TraceRow>* trace_fg = nullptr,
                           std::vector<TraceRow>* trace_fe = nullptr,
                           std::vector<TraceRow>* trace_fge = nullptr);

double predict_yield(const MixinnModel& m, const Eigen::VectorXd& xg,
                     const Eigen::VectorXd& xe);

// max relative error of analytic vs central finite-difference gradients of the
// single-sample MSE loss, over `points` random non-kink inputs
double gradient_check_encoder(const Mlp& m, std::uint64_t seed, int points = 10,
                              double epsilon = 1e-5, int max_params = 0);
double gradient_check_two_tower(const TwoTower& tt, std::uint64_t seed, int points = 10,
                                double epsilon = 1e-5, int max_params = 0);

// versioned binary checkpoints with an embedded spec header
void save_mlp(const std::string& path, const Mlp& m);
Mlp load_mlp(const std::string& path);
void save_two_tower(const std::string& path, const TwoTower& tt);
TwoTower load_two_tower(const std::string& path);

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace);

}  // namespace gxe
