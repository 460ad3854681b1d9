#include <algorithm>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mgrq/checkpoint.hpp"
#include "mgrq/errors.hpp"
#include "mgrq/harness.hpp"
#include "mgrq/reconstruct.hpp"

using namespace mgrq;

namespace {

struct ReconFlags {
  ReconstructionConfig rc;
  int bits_w = -1;
  int bits_a = -1;
  CLI::Option* bits_w_opt = nullptr;
  CLI::Option* bits_a_opt = nullptr;
};

void add_recon_options(CLI::App* sub, std::shared_ptr<ReconFlags> f) {
  sub->add_option("--iters", f->rc.iterations, "reconstruction iterations")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  sub->add_option("--lr", f->rc.lr, "Adam learning rate")
      ->capture_default_str();
  sub->add_option("--batch", f->rc.batch, "batch size")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--calib-size", f->rc.calib_size,
                  "calibration records drawn from the dataset")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--seed", f->rc.seed, "sampling seed")
      ->capture_default_str();
  sub->add_option("--alpha", f->rc.alpha, "fixed weight on the gradient loss")
      ->capture_default_str();
  sub->add_option("--beta", f->rc.beta, "fixed weight on the layer loss")
      ->capture_default_str();
  sub->add_flag("--auto-balance,!--no-auto-balance", f->rc.balance_auto,
                "balance the loss terms from their first measured values")
      ->capture_default_str();
}

void add_bits_options(CLI::App* sub, std::shared_ptr<ReconFlags> f) {
  f->bits_w_opt = sub->add_option("--bits-w", f->bits_w,
                                  "weight bits for the transformer blocks")
                      ->check(CLI::Range(2, 8));
  f->bits_a_opt = sub->add_option("--bits-a", f->bits_a,
                                  "activation bits for the transformer blocks")
                      ->check(CLI::Range(2, 8));
}

std::ofstream open_log(const std::string& path, const char* header) {
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw DataError(DataErrorKind::kNotFound,
                    "cannot open " + path + " for writing");
  out << header;
  return out;
}

std::string log_row(const LossLogRow& r) {
  char line[256];
  std::snprintf(line, sizeof(line), "%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                r.block, r.iteration, r.losses.obwr, r.losses.ebgs,
                r.losses.ibls, r.losses.alpha, r.losses.beta, r.losses.fused);
  return line;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// Flat key=value defaults for the chosen subcommand. Keys mirror the long
// flag names; anything already on the command line wins. Unknown keys are
// skipped so one file can serve several subcommands.
void merge_config_args(const CLI::App& app, const std::string& sub_name,
                       const std::string& path,
                       std::vector<std::string>& args) {
  std::ifstream in(path);
  if (!in)
    throw DataError(DataErrorKind::kNotFound,
                    "no such config file: " + path);
  const CLI::App* sub = app.get_subcommand_no_throw(sub_name);
  if (!sub) return;  // the parser reports the bad subcommand itself
  auto given = [&args](const std::string& flag) {
    for (const std::string& a : args)
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    return false;
  };
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    size_t eq = t.find('=');
    std::string key = eq == std::string::npos ? "" : trim(t.substr(0, eq));
    if (key.empty())
      throw DataError(DataErrorKind::kCorrupt,
                      path + ":" + std::to_string(lineno) +
                          ": expected key=value");
    if (key == "config") continue;
    if (!sub->get_option_no_throw("--" + key)) continue;
    if (given("--" + key) || given("--no-" + key)) continue;
    args.push_back("--" + key + "=" + trim(t.substr(eq + 1)));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixed granularity reconstruction quantization toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto gen = std::make_shared<std::tuple<std::string, std::string, uint64_t>>(
      "", "train", kToyDataSeed);
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "write a toy data split");
  gen_cmd->add_option("--out", std::get<0>(*gen), "output file")->required();
  gen_cmd->add_option("--split", std::get<1>(*gen), "train or test")
      ->check(CLI::IsMember({"train", "test"}));
  gen_cmd->add_option("--seed", std::get<2>(*gen), "generator seed")
      ->capture_default_str();
  gen_cmd->add_option("--config", "flat key=value defaults; command-line flags win");
  gen_cmd->callback([gen] {
    Split split =
        std::get<1>(*gen) == "test" ? Split::kTest : Split::kTrain;
    Dataset ds = toy_dataset(split, std::get<2>(*gen));
    save_dataset(ds, std::get<0>(*gen));
    std::printf("wrote %s (%zu records)\n", std::get<0>(*gen).c_str(),
                ds.size());
  });

  // train-fp
  struct TrainOpts {
    std::string dataset, ckpt_out;
    TrainConfig tc;
  };
  auto tr = std::make_shared<TrainOpts>();
  CLI::App* tr_cmd =
      app.add_subcommand("train-fp", "train the full-precision reference");
  tr_cmd->add_option("--dataset", tr->dataset, "training split")->required();
  tr_cmd->add_option("--checkpoint-out", tr->ckpt_out, "where to save")
      ->required();
  tr_cmd->add_option("--epochs", tr->tc.epochs, "training epochs")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  tr_cmd->add_option("--lr", tr->tc.lr, "Adam learning rate")
      ->capture_default_str();
  tr_cmd->add_option("--batch", tr->tc.batch, "batch size")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  tr_cmd->add_option("--seed", tr->tc.seed, "init and shuffle seed")
      ->capture_default_str();
  tr_cmd->add_option("--config", "flat key=value defaults; command-line flags win");
  tr_cmd->callback([tr] {
    Dataset train = load_dataset(tr->dataset);
    if (train.height != train.width)
      throw std::invalid_argument("model expects square images");
    ModelConfig cfg;
    cfg.image_size = int(train.height);
    cfg.channels = int(train.channels);
    cfg.classes = int(train.classes);
    cfg.validate();
    ViTModel m = train_toy_fp(train, cfg, tr->tc);
    save_checkpoint(m, tr->ckpt_out);
    std::printf("saved %s\n", tr->ckpt_out.c_str());
  });

  // calibrate
  struct CalOpts {
    std::string ckpt_in, dataset, ckpt_out;
  };
  auto cal = std::make_shared<CalOpts>();
  auto cal_flags = std::make_shared<ReconFlags>();
  CLI::App* cal_cmd = app.add_subcommand(
      "calibrate", "attach quant params from calibration data");
  cal_cmd->add_option("--checkpoint-in", cal->ckpt_in,
                      "full-precision checkpoint")
      ->required();
  cal_cmd->add_option("--dataset", cal->dataset, "calibration source split")
      ->required();
  cal_cmd->add_option("--checkpoint-out", cal->ckpt_out, "where to save")
      ->required();
  add_bits_options(cal_cmd, cal_flags);
  cal_cmd->add_option("--calib-size", cal_flags->rc.calib_size,
                      "calibration records drawn from the dataset")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cal_cmd->add_option("--batch", cal_flags->rc.batch, "batch size")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cal_cmd->add_option("--seed", cal_flags->rc.seed, "sampling seed")
      ->capture_default_str();
  cal_cmd->add_option("--config", "flat key=value defaults; command-line flags win");
  cal_cmd->callback([cal, cal_flags] {
    ViTModel m = load_checkpoint(cal->ckpt_in);
    if (cal_flags->bits_w_opt->count()) m.config.bits_w = cal_flags->bits_w;
    if (cal_flags->bits_a_opt->count()) m.config.bits_a = cal_flags->bits_a;
    Dataset ds = load_dataset(cal->dataset);
    Dataset calib = sample_calibration(ds, size_t(cal_flags->rc.calib_size),
                                       cal_flags->rc.seed);
    ReconstructionConfig rc = cal_flags->rc;
    rc.iterations = 0;
    ViTModel q = run_mgrq(m, calib, rc);
    save_checkpoint(q, cal->ckpt_out);
    std::printf("saved %s\n", cal->ckpt_out.c_str());
  });

  // reconstruct
  struct RecOpts {
    std::string ckpt_in, dataset, ckpt_out, loss_log;
  };
  auto rec = std::make_shared<RecOpts>();
  auto rec_flags = std::make_shared<ReconFlags>();
  CLI::App* rec_cmd = app.add_subcommand(
      "reconstruct", "calibrate and reconstruct block by block");
  rec_cmd->add_option("--checkpoint-in", rec->ckpt_in,
                      "full-precision checkpoint")
      ->required();
  rec_cmd->add_option("--dataset", rec->dataset, "calibration source split")
      ->required();
  rec_cmd->add_option("--checkpoint-out", rec->ckpt_out, "where to save")
      ->required();
  rec_cmd->add_option("--loss-log", rec->loss_log,
                      "per-iteration loss CSV");
  add_bits_options(rec_cmd, rec_flags);
  add_recon_options(rec_cmd, rec_flags);
  rec_cmd->add_option("--config", "flat key=value defaults; command-line flags win");
  rec_cmd->callback([rec, rec_flags] {
    ViTModel m = load_checkpoint(rec->ckpt_in);
    if (rec_flags->bits_w_opt->count()) m.config.bits_w = rec_flags->bits_w;
    if (rec_flags->bits_a_opt->count()) m.config.bits_a = rec_flags->bits_a;
    Dataset ds = load_dataset(rec->dataset);
    Dataset calib = sample_calibration(ds, size_t(rec_flags->rc.calib_size),
                                       rec_flags->rc.seed);
    std::ofstream log_out;
    LossLogFn log;
    if (!rec->loss_log.empty()) {
      log_out = open_log(rec->loss_log,
                         "block,iteration,obwr,ebgs,ibls,alpha,beta,fused\n");
      log = [&log_out](const LossLogRow& r) { log_out << log_row(r); };
    }
    ViTModel q = run_mgrq(m, calib, rec_flags->rc, log);
    save_checkpoint(q, rec->ckpt_out);
    std::printf("saved %s\n", rec->ckpt_out.c_str());
  });

  // eval
  auto ev = std::make_shared<std::pair<std::string, std::string>>();
  CLI::App* ev_cmd =
      app.add_subcommand("eval", "top-1 accuracy of a checkpoint");
  ev_cmd->add_option("--checkpoint-in", ev->first, "checkpoint to score")
      ->required();
  ev_cmd->add_option("--dataset", ev->second, "evaluation split")->required();
  ev_cmd->add_option("--config", "flat key=value defaults; command-line flags win");
  ev_cmd->callback([ev] {
    ViTModel m = load_checkpoint(ev->first);
    Dataset ds = load_dataset(ev->second);
    std::printf("top1 %.4f\n", evaluate_top1(m, ds));
  });

  // ablate
  struct AblOpts {
    std::string ckpt_in, dataset, test_dataset, report_out, loss_log;
  };
  auto ab = std::make_shared<AblOpts>();
  auto ab_flags = std::make_shared<ReconFlags>();
  ab_flags->bits_w = 4;
  ab_flags->bits_a = 4;
  CLI::App* ab_cmd = app.add_subcommand(
      "ablate", "score every loss combination against the baseline");
  ab_cmd->add_option("--checkpoint-in", ab->ckpt_in,
                     "full-precision checkpoint")
      ->required();
  ab_cmd->add_option("--dataset", ab->dataset, "training split (calibration "
                                               "source)")
      ->required();
  ab_cmd->add_option("--test-dataset", ab->test_dataset, "evaluation split")
      ->required();
  ab_cmd->add_option("--report-out", ab->report_out, "report CSV path");
  ab_cmd->add_option("--loss-log", ab->loss_log, "per-iteration loss CSV");
  add_bits_options(ab_cmd, ab_flags);
  add_recon_options(ab_cmd, ab_flags);
  ab_cmd->add_option("--config", "flat key=value defaults; command-line flags win");
  ab_cmd->callback([ab, ab_flags] {
    ViTModel fp = load_checkpoint(ab->ckpt_in);
    Dataset train = load_dataset(ab->dataset);
    Dataset test = load_dataset(ab->test_dataset);
    AblationConfig cfg;
    cfg.bits_w = ab_flags->bits_w;
    cfg.bits_a = ab_flags->bits_a;
    cfg.recon = ab_flags->rc;
    std::ofstream log_out;
    ArmLogFn log;
    if (!ab->loss_log.empty()) {
      log_out = open_log(
          ab->loss_log,
          "arm,block,iteration,obwr,ebgs,ibls,alpha,beta,fused\n");
      log = [&log_out](const std::string& arm, const LossLogRow& r) {
        log_out << arm << ',' << log_row(r);
      };
    }
    AblationReport report = run_ablation(fp, train, test, cfg, log);
    std::fputs(ablation_csv(report).c_str(), stdout);
    if (!ab->report_out.empty()) write_ablation_csv(report, ab->report_out);
  });

  std::vector<std::string> args(argv + 1, argv + argc);
  std::string sub_name, cfg_path;
  for (size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (sub_name.empty() && !a.empty() && a[0] != '-') {
      sub_name = a;
    } else if (a == "--config" && i + 1 < args.size()) {
      cfg_path = args[i + 1];
    } else if (a.rfind("--config=", 0) == 0) {
      cfg_path = a.substr(9);
    }
  }

  try {
    if (!cfg_path.empty() && !sub_name.empty())
      merge_config_args(app, sub_name, cfg_path, args);
    std::reverse(args.begin(), args.end());  // parse() consumes from the back
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
