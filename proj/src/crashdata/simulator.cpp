#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "opcrash/crashdata/crashdata.hpp"
#include "opcrash/errors.hpp"

namespace opcrash::crashdata {

namespace {

std::uint64_t fnv1a(std::uint64_t h, std::uint64_t word) {
  for (int i = 0; i < 8; ++i) {
    h ^= (word >> (8 * i)) & 0xffu;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

void DesignConfig::validate() const {
  if (!(sx > 0 && sy > 0 && sz > 0)) throw ConfigError("geometric scales must be positive");
  if (!(v0 < 0)) throw ConfigError("impact velocity must be negative (toward the impactor)");
  if (!(thickness > 0)) throw ConfigError("thickness scale must be positive");
  if (!std::isfinite(offset)) throw ConfigError("impactor offset must be finite");
}

std::uint64_t DesignConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (double d : {sx, sy, sz, v0, thickness, offset}) h = fnv1a(h, std::bit_cast<std::uint64_t>(d));
  return fnv1a(h, seed);
}

std::array<Vec3, 2> LatticeSpec::nominal_box() const {
  return {Vec3{0, -span / 2, 0},
          Vec3{layer_gap * static_cast<double>(layers - 1) + sag, span / 2, height}};
}

std::size_t span_nodes_for(std::size_t target_nodes, const LatticeSpec& spec) {
  const double per_station = static_cast<double>(spec.layers * spec.heights);
  return std::max<std::size_t>(2, static_cast<std::size_t>(
                                      std::lround(static_cast<double>(target_nodes) / per_station)));
}

std::size_t element_count(std::size_t u, std::size_t l, std::size_t h) {
  const std::size_t axial = (u - 1) * l * h + u * (l - 1) * h + u * l * (h - 1);
  const std::size_t faces = (u - 1) * (l - 1) * h + (u - 1) * l * (h - 1) + u * (l - 1) * (h - 1);
  return axial + 2 * faces;
}

BeamLattice build_lattice(const DesignConfig& config, std::size_t span_nodes,
                          const LatticeSpec& spec) {
  if (!(config.sx > 0 && config.sy > 0 && config.sz > 0 && config.thickness > 0)) {
    throw ConfigError("geometric and thickness scales must be positive");
  }
  if (span_nodes < 2 || spec.layers < 2 || spec.heights < 2) {
    throw ConfigError("lattice resolution needs at least 2 nodes per side");
  }
  BeamLattice lat;
  lat.span_nodes = span_nodes;
  lat.layers = spec.layers;
  lat.heights = spec.heights;
  const std::size_t n = span_nodes * spec.layers * spec.heights;
  lat.nodes.resize(n);
  lat.masses.assign(n, spec.node_mass);
  for (std::size_t u = 0; u < span_nodes; ++u) {
    const double s = static_cast<double>(u) / static_cast<double>(span_nodes - 1);  // 0..1
    const double y = (s - 0.5) * spec.span;
    const double bow = spec.sag * (2 * s - 1) * (2 * s - 1);
    for (std::size_t l = 0; l < spec.layers; ++l) {
      for (std::size_t h = 0; h < spec.heights; ++h) {
        const double z = spec.height * static_cast<double>(h) / static_cast<double>(spec.heights - 1);
        const std::size_t i = lat.index(u, l, h);
        lat.nodes[i] = {config.sx * (spec.layer_gap * static_cast<double>(l) + bow), config.sy * y,
                        config.sz * z};
        if (u == 0 || u + 1 == span_nodes) lat.masses[i] += spec.end_mass;
      }
    }
  }

  const double h_ratio = spec.hardening_ratio;
  auto link = [&](std::size_t a, std::size_t b) {
    Element e;
    e.a = static_cast<std::uint32_t>(a);
    e.b = static_cast<std::uint32_t>(b);
    const Vec3& p = lat.nodes[a];
    const Vec3& q = lat.nodes[b];
    const double d[3] = {q[0] - p[0], q[1] - p[1], q[2] - p[2]};
    // Same expression as the force loop, so an undeformed lattice is force-free.
    e.rest = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    e.stiffness = spec.axial_rigidity * config.thickness / e.rest;
    e.yield_force = spec.axial_rigidity * config.thickness * spec.yield_strain;
    e.hardening_modulus = e.stiffness * h_ratio / (1 - h_ratio);
    e.damping = spec.damping_time * e.stiffness;
    lat.elements.push_back(e);
  };
  const std::size_t U = span_nodes, L = spec.layers, H = spec.heights;
  for (std::size_t u = 0; u < U; ++u) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t i = lat.index(u, l, h);
        const bool nu = u + 1 < U, nl = l + 1 < L, nh = h + 1 < H;
        if (nu) link(i, lat.index(u + 1, l, h));
        if (nl) link(i, lat.index(u, l + 1, h));
        if (nh) link(i, lat.index(u, l, h + 1));
        if (nu && nl) {
          link(i, lat.index(u + 1, l + 1, h));
          link(lat.index(u + 1, l, h), lat.index(u, l + 1, h));
        }
        if (nu && nh) {
          link(i, lat.index(u + 1, l, h + 1));
          link(lat.index(u + 1, l, h), lat.index(u, l, h + 1));
        }
        if (nl && nh) {
          link(i, lat.index(u, l + 1, h + 1));
          link(lat.index(u, l + 1, h), lat.index(u, l, h + 1));
        }
      }
    }
  }

  // Front face at x = bow(y); the cylinder sits just ahead of the impacted point.
  const double s_hit = std::clamp(config.offset / spec.span + 0.5, 0.0, 1.0);
  const double front = config.sx * spec.sag * (2 * s_hit - 1) * (2 * s_hit - 1);
  lat.impactor = {front - spec.impactor_gap - spec.impactor_radius, config.offset,
                  spec.impactor_radius, spec.contact_stiffness};
  return lat;
}

std::array<std::uint32_t, 2> probe_points(const BeamLattice& lat) {
  const std::size_t quarter = static_cast<std::size_t>(
      std::lround(static_cast<double>(lat.span_nodes - 1) / 4.0));
  const std::size_t rear = lat.layers - 1, h = (lat.heights - 1) / 2;
  return {static_cast<std::uint32_t>(lat.index(quarter, rear, h)),
          static_cast<std::uint32_t>(lat.index(lat.span_nodes - 1 - quarter, rear, h))};
}

double stable_dt(const BeamLattice& lat) {
  std::vector<double> row(lat.size(), lat.impactor.stiffness);
  std::vector<double> damp(lat.size(), 0.0);
  for (const auto& e : lat.elements) {
    row[e.a] += 2 * e.stiffness;
    row[e.b] += 2 * e.stiffness;
    damp[e.a] = std::max(damp[e.a], e.damping / e.stiffness);
    damp[e.b] = std::max(damp[e.b], e.damping / e.stiffness);
  }
  double dt = INFINITY;
  for (std::size_t i = 0; i < lat.size(); ++i) {
    const double w = std::sqrt(row[i] / lat.masses[i]);
    if (w == 0) continue;
    const double xi = 0.5 * damp[i] * w;
    dt = std::min(dt, 2.0 / w * (std::sqrt(1 + xi * xi) - xi));
  }
  return dt;
}

SimResult simulate(const BeamLattice& lat, const Vec3& v0, const SimOptions& opt) {
  if (opt.frames == 0 || opt.substeps == 0 || !(opt.frame_dt > 0)) {
    throw ConfigError("simulation needs positive frames, substeps and frame_dt");
  }
  const double dt = opt.frame_dt / static_cast<double>(opt.substeps);
  const double limit = stable_dt(lat);
  if (!(dt < limit)) {
    throw ConfigError("substep " + std::to_string(dt) + " ms exceeds the stability limit " +
                      std::to_string(limit) + " ms");
  }
  const std::size_t n = lat.size(), ne = lat.elements.size();
  std::vector<double> x(3 * n), v(3 * n), v_next(3 * n), f(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) {
      x[3 * i + k] = lat.nodes[i][k];
      v[3 * i + k] = v0[k];
    }
  }
  std::vector<double> plastic(ne, 0.0), backstress(ne, 0.0), accumulated(ne, 0.0);

  SimResult res;
  res.positions = Tensor<double>({opt.frames + 1, n, 3});
  res.velocities = Tensor<double>({opt.frames + 1, n, 3});
  res.min_rest_length = INFINITY;
  for (const auto& e : lat.elements) res.min_rest_length = std::min(res.min_rest_length, e.rest);
  std::copy(x.begin(), x.end(), res.positions.row(0));
  std::copy(v.begin(), v.end(), res.velocities.row(0));
  res.plastic_history = Tensor<double>({opt.frames + 1, ne});

  double e0 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    e0 += 0.5 * lat.masses[i] * (v0[0] * v0[0] + v0[1] * v0[1] + v0[2] * v0[2]);
  }
  const Impactor& w = lat.impactor;
  double w_plastic = 0, w_damp = 0;

  const std::size_t total = opt.frames * opt.substeps;
  for (std::size_t step = 0; step < total; ++step) {
    std::fill(f.begin(), f.end(), 0.0);
    EnergyState es;
    for (std::size_t j = 0; j < ne; ++j) {
      const Element& e = lat.elements[j];
      const double* pa = &x[3 * e.a];
      const double* pb = &x[3 * e.b];
      const double d[3] = {pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]};
      const double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
      if (!(len > 1e-12)) continue;
      const double dir[3] = {d[0] / len, d[1] / len, d[2] / len};
      const double stretch = len - e.rest;
      double force = e.stiffness * (stretch - plastic[j]);
      const double over = force - backstress[j];
      if (std::abs(over) > e.yield_force) {
        const double gamma = (std::abs(over) - e.yield_force) / (e.stiffness + e.hardening_modulus);
        const double sign = over > 0 ? 1.0 : -1.0;
        plastic[j] += sign * gamma;
        backstress[j] += sign * e.hardening_modulus * gamma;
        accumulated[j] += gamma;
        w_plastic += e.yield_force * gamma;
        force = e.stiffness * (stretch - plastic[j]);
      }
      const double elastic = stretch - plastic[j];
      es.elastic += 0.5 * e.stiffness * elastic * elastic;
      if (e.hardening_modulus > 0) {
        es.hardening += 0.5 * backstress[j] * backstress[j] / e.hardening_modulus;
      }
      const double* va = &v[3 * e.a];
      const double* vb = &v[3 * e.b];
      const double rate = (vb[0] - va[0]) * dir[0] + (vb[1] - va[1]) * dir[1] + (vb[2] - va[2]) * dir[2];
      const double dashpot = e.damping * rate;
      w_damp += dashpot * rate * dt;
      const double axial = force + dashpot;
      for (int k = 0; k < 3; ++k) {
        f[3 * e.a + k] += axial * dir[k];
        f[3 * e.b + k] -= axial * dir[k];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double dx = x[3 * i] - w.x, dy = x[3 * i + 1] - w.y;
      const double r = std::hypot(dx, dy);
      const double pen = w.radius - r;
      if (pen > 0 && r > 0) {
        f[3 * i] += w.stiffness * pen * dx / r;
        f[3 * i + 1] += w.stiffness * pen * dy / r;
        es.contact += 0.5 * w.stiffness * pen * pen;
        res.max_penetration = std::max(res.max_penetration, pen);
      }
    }
    // Kinetic energy at x_n as the product of the two staggered velocities,
    // the invariant of the semi-implicit scheme for quadratic potentials.
    for (std::size_t i = 0; i < n; ++i) {
      const double inv_m = 1.0 / lat.masses[i];
      double ke = 0;
      for (int k = 0; k < 3; ++k) {
        v_next[3 * i + k] = v[3 * i + k] + dt * f[3 * i + k] * inv_m;
        ke += v[3 * i + k] * v_next[3 * i + k];
      }
      es.kinetic += 0.5 * lat.masses[i] * ke;
    }
    es.plastic = w_plastic;
    es.damping = w_damp;
    const double etot = es.total();
    const double mech = es.kinetic + es.elastic + es.hardening + es.contact;
    if (!std::isfinite(etot) || mech > 10.0 * std::max(e0, 1e-12)) {
      throw SimulationError("energy grew from " + std::to_string(e0) + " J to " +
                            std::to_string(mech) + " J at substep " + std::to_string(step));
    }
    if (e0 > 0) res.max_energy_error = std::max(res.max_energy_error, std::abs(etot - e0) / e0);
    if (step % opt.substeps == 0) res.energy.push_back(es);

    v.swap(v_next);
    for (std::size_t k = 0; k < 3 * n; ++k) x[k] += dt * v[k];
    if ((step + 1) % opt.substeps == 0) {
      const std::size_t frame = (step + 1) / opt.substeps;
      std::copy(x.begin(), x.end(), res.positions.row(frame));
      std::copy(v.begin(), v.end(), res.velocities.row(frame));
      double* hist = res.plastic_history.row(frame);
      for (std::size_t j = 0; j < ne; ++j) {
        if (accumulated[j] < hist[j - ne]) res.plastic_monotone = false;
        hist[j] = accumulated[j];
      }
    }
  }
  res.plastic = accumulated;
  res.yielded = static_cast<std::size_t>(
      std::count_if(accumulated.begin(), accumulated.end(), [](double p) { return p > 0; }));
  return res;
}

}  // namespace opcrash::crashdata
