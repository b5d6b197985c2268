// SPDX-License-Identifier: Apache-2.0
#include <sstream>
#include <variant>

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "graphfree/analysis.hpp"
#include "graphfree/cli.hpp"
#include "graphfree/codebook.hpp"
#include "graphfree/data.hpp"
#include "graphfree/md.hpp"
#include "graphfree/training.hpp"

namespace py = pybind11;
using namespace graphfree;

namespace {

py::object to_python(const nlohmann::json &j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

py::array_t<double> as_array(const std::vector<Vec3> &v) {
  py::array_t<double> a({static_cast<py::ssize_t>(v.size()), py::ssize_t{3}});
  auto m = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (py::ssize_t k = 0; k < 3; ++k) {
      m(static_cast<py::ssize_t>(i), k) = v[i][static_cast<std::size_t>(k)];
    }
  }
  return a;
}

std::vector<Vec3> as_vec3(const py::array_t<double, py::array::c_style | py::array::forcecast> &a) {
  if (a.ndim() != 2 || a.shape(1) != 3) {
    throw std::invalid_argument("expected an (n, 3) array");
  }
  auto r = a.unchecked<2>();
  std::vector<Vec3> v(static_cast<std::size_t>(a.shape(0)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) {
    v[static_cast<std::size_t>(i)] = {r(i, 0), r(i, 1), r(i, 2)};
  }
  return v;
}

tokens::Mode mode_from(const std::string &m) {
  if (m == "pretrain") {
    return tokens::Mode::Pretrain;
  }
  if (m == "finetune") {
    return tokens::Mode::Finetune;
  }
  throw std::invalid_argument("mode must be 'pretrain' or 'finetune'");
}

struct Codebook {
  codebook::QuantileCodebook cb;
  tokens::Vocabulary vocab;

  explicit Codebook(codebook::QuantileCodebook c) : cb(std::move(c)), vocab(tokens::build_vocab(cb)) {}
};

/// A checkpoint in whichever precision it was saved.
class Model {
public:
  explicit Model(const std::string &path) {
    if (training::checkpoint_precision(path) == model::Precision::Float64) {
      state_ = training::load_checkpoint<double>(path);
    } else {
      state_ = training::load_checkpoint<float>(path);
    }
  }

  template <typename F>
  decltype(auto) visit(F &&f) const {
    return std::visit([&](const auto &s) -> decltype(auto) { return f(s); }, state_);
  }

private:
  std::variant<training::TrainState<float>, training::TrainState<double>> state_;
};

void check_hash(const Model &m, const Codebook &c) {
  const auto want = m.visit([](const auto &s) { return s.codebook_hash; });
  if (want != codebook::content_hash(c.cb)) {
    throw std::invalid_argument("checkpoint was trained with a different codebook");
  }
}

py::dict trajectory_dict(const md::Trajectory &t) {
  std::vector<double> time, pot, kin;
  std::vector<py::array_t<double>> pos;
  for (const auto &s : t.samples) {
    time.push_back(s.time_fs);
    pot.push_back(s.potential);
    kin.push_back(s.kinetic);
    pos.push_back(as_array(s.positions));
  }
  py::dict d;
  d["time_fs"] = py::array(py::cast(time));
  d["potential"] = py::array(py::cast(pot));
  d["kinetic"] = py::array(py::cast(kin));
  d["positions"] = pos;
  d["unstable"] = t.unstable;
  d["diagnostic"] = t.diagnostic;
  d["energy_drift"] = md::energy_drift(t);
  return d;
}

} // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Graph-free transformer for molecular energies and forces";
  m.attr("__version__") = GRAPHFREE_VERSION;

  py::class_<MolecularFrame>(m, "Frame")
      .def(py::init([](std::vector<int> z, const py::array_t<double> &positions, int charge, int spin,
                       std::optional<double> energy, std::optional<py::array_t<double>> forces) {
             MolecularFrame f;
             f.atomic_numbers = std::move(z);
             f.positions = as_vec3(positions);
             f.charge = charge;
             f.spin = spin;
             f.energy = energy;
             if (forces) {
               f.forces = as_vec3(*forces);
             }
             f.validate();
             return f;
           }),
           py::arg("atomic_numbers"), py::arg("positions"), py::arg("charge") = 0,
           py::arg("spin") = 0, py::arg("energy") = py::none(), py::arg("forces") = py::none())
      .def_readwrite("atomic_numbers", &MolecularFrame::atomic_numbers)
      .def_property(
          "positions", [](const MolecularFrame &f) { return as_array(f.positions); },
          [](MolecularFrame &f, const py::array_t<double> &a) { f.positions = as_vec3(a); })
      .def_property(
          "forces",
          [](const MolecularFrame &f) -> py::object {
            return f.forces ? py::object(as_array(*f.forces)) : py::object(py::none());
          },
          [](MolecularFrame &f, std::optional<py::array_t<double>> a) {
            f.forces = a ? std::optional(as_vec3(*a)) : std::nullopt;
          })
      .def_readwrite("energy", &MolecularFrame::energy)
      .def_readwrite("charge", &MolecularFrame::charge)
      .def_readwrite("spin", &MolecularFrame::spin)
      .def("__len__", &MolecularFrame::size)
      .def("__eq__", [](const MolecularFrame &a, const MolecularFrame &b) { return a == b; })
      .def("__repr__", [](const MolecularFrame &f) {
        return "<Frame atoms=" + std::to_string(f.size()) +
               (f.energy ? " energy=" + std::to_string(*f.energy) : "") + ">";
      });

  m.def("parse_xyz", [](const std::string &text) { return data::parse_xyz(text); }, py::arg("text"));
  m.def("read_xyz", &data::read_xyz_file, py::arg("path"));
  m.def("to_xyz", [](const std::vector<MolecularFrame> &f) { return data::write_xyz(f); },
        py::arg("frames"));
  m.def("write_xyz",
        [](const std::string &path, const std::vector<MolecularFrame> &f) {
          data::write_xyz_file(path, f);
        },
        py::arg("path"), py::arg("frames"));

  m.def(
      "lennard_jones",
      [](const py::array_t<double> &positions, double epsilon, double sigma) {
        data::LjParameters p;
        p.epsilon = epsilon;
        p.sigma = sigma;
        const auto r = data::lennard_jones(as_vec3(positions), p);
        return py::make_tuple(r.energy, as_array(r.forces));
      },
      py::arg("positions"), py::arg("epsilon") = data::LjParameters{}.epsilon,
      py::arg("sigma") = data::LjParameters{}.sigma, "Energy (eV) and forces (eV/Å).");
  m.def(
      "generate_lj_dataset",
      [](std::size_t n, int lo, int hi, std::uint64_t seed) {
        Rng rng(seed);
        return data::generate_lj_dataset(n, lo, hi, rng);
      },
      py::arg("n_frames"), py::arg("atoms_min") = 2, py::arg("atoms_max") = 12, py::arg("seed") = 0);

  py::class_<Codebook>(m, "Codebook")
      .def_static(
          "fit",
          [](const std::vector<MolecularFrame> &frames, int position_bins, int position_1d_bins,
             int force_bins, int energy_bins) {
            codebook::CodebookConfig c;
            c.position_grid_bins = position_bins;
            c.position_1d_bins = position_1d_bins;
            c.force_bins = force_bins;
            c.energy_bins = energy_bins;
            return Codebook(codebook::fit_codebook(frames, c));
          },
          py::arg("frames"), py::arg("position_bins") = 10, py::arg("position_1d_bins") = 512,
          py::arg("force_bins") = 4096, py::arg("energy_bins") = 2048)
      .def_static("load", [](const std::string &path) { return Codebook(codebook::load(path)); },
                  py::arg("path"))
      .def("save", [](const Codebook &c, const std::string &path) { codebook::save(path, c.cb); },
           py::arg("path"))
      .def_property_readonly("hash", [](const Codebook &c) { return codebook::content_hash(c.cb); })
      .def_property_readonly("vocab_size", [](const Codebook &c) { return c.vocab.size(); })
      .def("token_text", [](const Codebook &c, std::int32_t id) { return c.vocab.text(id); })
      .def(
          "encode",
          [](const Codebook &c, const MolecularFrame &f, const std::string &mode) {
            const auto seq = tokens::encode_frame(f, c.cb, c.vocab, mode_from(mode));
            py::array_t<double> cont({static_cast<py::ssize_t>(seq.length()),
                                      static_cast<py::ssize_t>(tokens::kContinuousWidth)});
            auto w = cont.mutable_unchecked<2>();
            for (std::size_t t = 0; t < seq.length(); ++t) {
              for (std::size_t k = 0; k < tokens::kContinuousWidth; ++k) {
                w(static_cast<py::ssize_t>(t), static_cast<py::ssize_t>(k)) = seq.continuous[t][k];
              }
            }
            py::dict d;
            d["token_ids"] = py::array(py::cast(seq.token_ids));
            d["continuous"] = cont;
            d["text"] = tokens::render(seq, c.vocab);
            return d;
          },
          py::arg("frame"), py::arg("mode") = "finetune",
          "Token ids, continuous channels and a readable rendering.");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string &>(), py::arg("checkpoint"))
      .def_property_readonly("config",
                             [](const Model &mo) {
                               return mo.visit([](const auto &s) {
                                 nlohmann::json j = s.params.config;
                                 return to_python(j);
                               });
                             })
      .def_property_readonly("step", [](const Model &mo) {
        return mo.visit([](const auto &s) { return s.step; });
      })
      .def(
          "predict",
          [](const Model &mo, const Codebook &c, const MolecularFrame &f, bool conservative) {
            check_hash(mo, c);
            const auto seq = tokens::encode_frame(f, c.cb, c.vocab, tokens::Mode::Finetune);
            const auto ef = mo.visit([&](const auto &s) {
              return conservative ? model::conservative_forces(s.params, seq)
                                  : model::predict_energy_forces(s.params, seq);
            });
            return py::make_tuple(ef.energy, as_array(ef.forces));
          },
          py::arg("codebook"), py::arg("frame"), py::arg("conservative") = false,
          "Energy (eV) and forces (eV/Å).")
      .def(
          "log_prob",
          [](const Model &mo, const Codebook &c, const MolecularFrame &f) {
            check_hash(mo, c);
            const auto seq = tokens::encode_frame(f, c.cb, c.vocab, tokens::Mode::Pretrain);
            return mo.visit([&](const auto &s) { return analysis::sequence_log_prob(s.params, seq); });
          },
          py::arg("codebook"), py::arg("frame"))
      .def(
          "evaluate",
          [](const Model &mo, const Codebook &c, const std::vector<MolecularFrame> &frames,
             bool conservative) {
            check_hash(mo, c);
            const auto ev = mo.visit([&](const auto &s) {
              return training::evaluate(s.params, frames, c.cb, c.vocab, {.conservative = conservative});
            });
            nlohmann::json j = ev.metrics;
            return to_python(j);
          },
          py::arg("codebook"), py::arg("frames"), py::arg("conservative") = false);

  m.def(
      "effective_radius",
      [](const std::vector<double> &a, const std::vector<double> &d, double delta) {
        return analysis::effective_radius(a, d, delta);
      },
      py::arg("attention"), py::arg("distances"), py::arg("delta") = 0.9);
  m.def(
      "fit_power_law",
      [](const std::vector<double> &n, const std::vector<double> &l) {
        if (n.size() != l.size()) {
          throw std::invalid_argument("n and loss lengths differ");
        }
        std::vector<std::array<double, 2>> pts;
        for (std::size_t i = 0; i < n.size(); ++i) {
          pts.push_back({n[i], l[i]});
        }
        nlohmann::json j = analysis::fit_power_law(pts);
        return to_python(j);
      },
      py::arg("n"), py::arg("loss"));
  m.def(
      "fit_joint_scaling",
      [](const std::vector<double> &n, const std::vector<double> &d, const std::vector<double> &l,
         std::size_t starts, std::uint64_t seed) {
        if (n.size() != d.size() || n.size() != l.size()) {
          throw std::invalid_argument("n, d and loss lengths differ");
        }
        std::vector<std::array<double, 3>> pts;
        for (std::size_t i = 0; i < n.size(); ++i) {
          pts.push_back({n[i], d[i], l[i]});
        }
        nlohmann::json j = analysis::fit_joint_scaling(pts, {.starts = starts, .seed = seed});
        return to_python(j);
      },
      py::arg("n"), py::arg("d"), py::arg("loss"), py::arg("starts") = 24, py::arg("seed") = 0);
  m.def(
      "isoflop",
      [](double l_inf, double a, double alpha, double b, double beta, double flops) {
        const analysis::JointScalingFit fit{l_inf, a, alpha, b, beta, 0.0, false};
        nlohmann::json j = analysis::isoflop_curve(fit, flops);
        return to_python(j);
      },
      py::arg("l_inf"), py::arg("a"), py::arg("alpha"), py::arg("b"), py::arg("beta"),
      py::arg("flops"));

  m.def(
      "run_md",
      [](const MolecularFrame &f, const std::string &ensemble, double dt_fs, std::size_t steps,
         std::size_t stride, double temperature_k, double friction_per_fs, std::uint64_t seed,
         const Model *model, const Codebook *cb, bool conservative) {
        md::ForceProvider provider = md::lj_provider();
        if (model) {
          if (!cb) {
            throw std::invalid_argument("a model provider needs its codebook");
          }
          check_hash(*model, *cb);
          const md::ModelProviderOptions o{
              .mode = conservative ? md::ForceMode::Conservative : md::ForceMode::Direct,
              .freeze_tokens = conservative};
          provider = model->visit([&](const auto &s) {
            return md::model_provider(s.params, cb->cb, cb->vocab, o);
          });
        }
        if (ensemble != "nve" && ensemble != "nvt") {
          throw std::invalid_argument("ensemble must be 'nve' or 'nvt'");
        }
        auto state = md::MDState::from_frame(f);
        Rng rng(seed);
        md::maxwell_boltzmann(state, temperature_k, rng);
        md::Trajectory t;
        {
          py::gil_scoped_release release;
          t = ensemble == "nve"
                  ? md::run_nve(state, provider, dt_fs, steps, stride)
                  : md::run_nvt(state, provider, dt_fs, steps, stride,
                                {temperature_k, friction_per_fs}, rng);
        }
        return trajectory_dict(t);
      },
      py::arg("frame"), py::arg("ensemble") = "nvt", py::arg("dt_fs") = 1.0,
      py::arg("steps") = 1000, py::arg("stride") = 10, py::arg("temperature_k") = 300.0,
      py::arg("friction_per_fs") = 0.01, py::arg("seed") = 0, py::arg("model") = nullptr,
      py::arg("codebook") = nullptr, py::arg("conservative") = false,
      "Lennard-Jones dynamics, or model-driven dynamics when a model is given.");
  m.def(
      "h_of_r",
      [](const std::vector<py::array_t<double>> &frames, double r_max, std::size_t n_bins) {
        std::vector<std::vector<Vec3>> pos;
        for (const auto &a : frames) {
          pos.push_back(as_vec3(a));
        }
        const auto h = md::h_of_r(pos, r_max, n_bins);
        return py::make_tuple(h.bin_width(), py::array(py::cast(h.density)));
      },
      py::arg("positions"), py::arg("r_max") = 10.0, py::arg("n_bins") = 200,
      "Bin width and pair-distance density.");

  m.def(
      "cli",
      [](const std::vector<std::string> &args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one command-line subcommand; returns (exit_code, stdout, stderr).");
}
