//! Tetrahedral meshes of the unit-scale object and its truncated exterior.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use gmpt_core::linalg::{self, cross, dot, norm, sub, Mat3, Vec3};
use gmpt_core::tensor::ORTHOGONALITY_TOL;
use sha2::{Digest, Sha256};

pub const MU0: f64 = 4.0e-7 * std::f64::consts::PI;

/// Local vertex pairs of the six tet edges.
pub const LOCAL_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("cannot read mesh: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mesh invariant violated ({check}): {detail}")]
    InvariantViolation { check: &'static str, detail: String },
    #[error("transformation matrix is not orthogonal (defect {0:.3e})")]
    NonOrthogonal(f64),
    #[error("Pólya–Szegő tensor is degenerate (det = {0:.3e})")]
    DegenerateTensor(f64),
    #[error("invalid object specification: {0}")]
    InvalidSpec(String),
}

fn violation(check: &'static str, detail: impl Into<String>) -> MeshError {
    MeshError::InvariantViolation { check, detail: detail.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Exterior,
    Object,
}

impl Region {
    pub fn tag(self) -> u8 {
        match self {
            Region::Exterior => 0,
            Region::Object => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaceTag {
    Gamma,
    Far,
}

impl FaceTag {
    pub fn name(self) -> &'static str {
        match self {
            FaceTag::Gamma => "GAMMA",
            FaceTag::Far => "FAR",
        }
    }
}

/// A face on the object surface with its owning object tet and outward unit normal.
#[derive(Debug, Clone)]
pub struct InterfaceFace {
    pub vertices: [usize; 3],
    pub object_tet: usize,
    pub normal: Vec3,
    pub area: f64,
}

#[derive(Debug, Clone)]
pub struct TetMesh {
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    regions: Vec<Region>,
    faces: Vec<([usize; 3], FaceTag)>,
    edges: Vec<[usize; 2]>,
    tet_edges: Vec<[usize; 6]>,
    interface: Vec<InterfaceFace>,
    far_edges: Vec<bool>,
}

fn sorted3(f: [usize; 3]) -> [usize; 3] {
    let mut s = f;
    s.sort_unstable();
    s
}

pub fn tet_volume(p: &[Vec3; 4]) -> f64 {
    dot(&sub(&p[1], &p[0]), &cross(&sub(&p[2], &p[0]), &sub(&p[3], &p[0]))) / 6.0
}

impl TetMesh {
    /// Builds and validates a mesh.
    pub fn new(
        vertices: Vec<Vec3>,
        tets: Vec<[usize; 4]>,
        regions: Vec<Region>,
        faces: Vec<([usize; 3], FaceTag)>,
    ) -> Result<Self, MeshError> {
        if tets.len() != regions.len() {
            return Err(violation("region tags", "one region tag per tet required"));
        }
        let nv = vertices.len();
        if let Some(v) = vertices.iter().find(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(violation("finite coordinates", format!("{v:?}")));
        }
        for (t, tet) in tets.iter().enumerate() {
            if tet.iter().any(|&v| v >= nv) {
                return Err(violation("vertex ids", format!("tet {t} references a missing vertex")));
            }
            let mut s = *tet;
            s.sort_unstable();
            if s.windows(2).any(|w| w[0] == w[1]) {
                return Err(violation("vertex ids", format!("tet {t} repeats a vertex")));
            }
        }
        for (n, (f, _)) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= nv) {
                return Err(violation("vertex ids", format!("face {n} references a missing vertex")));
            }
        }
        let mut mesh = TetMesh {
            vertices,
            tets,
            regions,
            faces,
            edges: Vec::new(),
            tet_edges: Vec::new(),
            interface: Vec::new(),
            far_edges: Vec::new(),
        };
        mesh.validate_and_derive()?;
        Ok(mesh)
    }

    fn validate_and_derive(&mut self) -> Result<(), MeshError> {
        for t in 0..self.tets.len() {
            let vol = tet_volume(&self.tet_points(t));
            if !(vol > 0.0) {
                return Err(violation(
                    "negative volume",
                    format!("tet {t} has signed volume {vol:.3e}"),
                ));
            }
        }
        if !self.regions.contains(&Region::Object) {
            return Err(violation("object region", "no tets tagged as object"));
        }
        if !self.regions.contains(&Region::Exterior) {
            return Err(violation("exterior region", "no tets tagged as exterior"));
        }

        let mut owners: HashMap<[usize; 3], Vec<(usize, usize)>> = HashMap::new();
        for (t, tet) in self.tets.iter().enumerate() {
            for opposite in 0..4 {
                let mut f = [0usize; 3];
                let mut n = 0;
                for (k, &v) in tet.iter().enumerate() {
                    if k != opposite {
                        f[n] = v;
                        n += 1;
                    }
                }
                owners.entry(sorted3(f)).or_default().push((t, opposite));
            }
        }
        let mut tags: HashMap<[usize; 3], FaceTag> = HashMap::new();
        for (f, tag) in &self.faces {
            if tags.insert(sorted3(*f), *tag).is_some() {
                return Err(violation("face tags", format!("face {f:?} tagged twice")));
            }
        }

        let mut interface = Vec::new();
        for (key, own) in &owners {
            let tag = tags.get(key).copied();
            match own.len() {
                1 => {
                    let (t, _) = own[0];
                    if tag != Some(FaceTag::Far) {
                        return Err(violation(
                            "conforming boundary",
                            format!("boundary face {key:?} is not tagged FAR (hanging node or missing tag)"),
                        ));
                    }
                    if self.regions[t] == Region::Object {
                        return Err(violation(
                            "FAR faces exterior only",
                            format!("FAR face {key:?} belongs to object tet {t}"),
                        ));
                    }
                }
                2 => {
                    let (a, _) = own[0];
                    let (b, _) = own[1];
                    let crossing = self.regions[a] != self.regions[b];
                    match (crossing, tag) {
                        (true, Some(FaceTag::Gamma)) => {
                            let (obj, opp) =
                                if self.regions[a] == Region::Object { own[0] } else { own[1] };
                            interface.push(self.interface_face(*key, obj, opp));
                        }
                        (true, _) => {
                            return Err(violation(
                                "non-watertight Γ",
                                format!("object/exterior face {key:?} is not tagged GAMMA"),
                            ))
                        }
                        (false, Some(t)) => {
                            return Err(violation(
                                "tag placement",
                                format!("{} face {key:?} is interior to one region", t.name()),
                            ))
                        }
                        (false, None) => {}
                    }
                }
                n => {
                    return Err(violation(
                        "conforming mesh",
                        format!("face {key:?} shared by {n} tets"),
                    ))
                }
            }
        }
        for key in tags.keys() {
            if !owners.contains_key(key) {
                return Err(violation("face tags", format!("tagged face {key:?} is not a tet face")));
            }
        }
        interface.sort_by_key(|f| sorted3(f.vertices));
        self.interface = interface;

        let mut edge_ids: HashMap<[usize; 2], usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut tet_edges = Vec::with_capacity(self.tets.len());
        for tet in &self.tets {
            let mut ids = [0usize; 6];
            for (n, &(a, b)) in LOCAL_EDGES.iter().enumerate() {
                let key = [tet[a].min(tet[b]), tet[a].max(tet[b])];
                ids[n] = *edge_ids.entry(key).or_insert_with(|| {
                    edges.push(key);
                    edges.len() - 1
                });
            }
            tet_edges.push(ids);
        }
        let mut far_edges = vec![false; edges.len()];
        for (f, tag) in &self.faces {
            if *tag == FaceTag::Far {
                for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                    let key = [f[a].min(f[b]), f[a].max(f[b])];
                    far_edges[edge_ids[&key]] = true;
                }
            }
        }
        self.edges = edges;
        self.tet_edges = tet_edges;
        self.far_edges = far_edges;
        Ok(())
    }

    fn interface_face(&self, key: [usize; 3], tet: usize, opposite: usize) -> InterfaceFace {
        let p: Vec<Vec3> = key.iter().map(|&v| self.vertices[v]).collect();
        let mut normal = cross(&sub(&p[1], &p[0]), &sub(&p[2], &p[0]));
        let area = 0.5 * norm(&normal);
        normal = linalg::scale(&normal, 0.5 / area);
        let inner = self.vertices[self.tets[tet][opposite]];
        if dot(&normal, &sub(&p[0], &inner)) < 0.0 {
            normal = linalg::scale(&normal, -1.0);
        }
        InterfaceFace { vertices: key, object_tet: tet, normal, area }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn faces(&self) -> &[([usize; 3], FaceTag)] {
        &self.faces
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn tet_edges(&self, t: usize) -> &[usize; 6] {
        &self.tet_edges[t]
    }

    /// Sign of local edge `n` of tet `t` relative to its global orientation (low → high id).
    pub fn edge_sign(&self, t: usize, n: usize) -> f64 {
        let (a, b) = LOCAL_EDGES[n];
        if self.tets[t][a] < self.tets[t][b] {
            1.0
        } else {
            -1.0
        }
    }

    pub fn interface(&self) -> &[InterfaceFace] {
        &self.interface
    }

    pub fn is_far_edge(&self, e: usize) -> bool {
        self.far_edges[e]
    }

    pub fn tet_points(&self, t: usize) -> [Vec3; 4] {
        self.tets[t].map(|v| self.vertices[v])
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        tet_volume(&self.tet_points(t))
    }

    pub fn object_tets(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.tets.len()).filter(|&t| self.regions[t] == Region::Object)
    }

    pub fn count(&self, region: Region) -> usize {
        self.regions.iter().filter(|&&r| r == region).count()
    }

    pub fn object_volume(&self) -> f64 {
        self.object_tets().map(|t| self.tet_volume(t)).sum()
    }

    pub fn object_centroid(&self) -> Vec3 {
        let mut acc = [0.0; 3];
        let mut vol = 0.0;
        for t in self.object_tets() {
            let p = self.tet_points(t);
            let v = tet_volume(&p);
            for i in 0..3 {
                acc[i] += v * (p[0][i] + p[1][i] + p[2][i] + p[3][i]) / 4.0;
            }
            vol += v;
        }
        acc.map(|a| a / vol)
    }

    /// Largest distance from the origin to an object vertex.
    pub fn object_radius(&self) -> f64 {
        self.object_tets()
            .flat_map(|t| self.tets[t])
            .map(|v| norm(&self.vertices[v]))
            .fold(0.0, f64::max)
    }

    /// Largest distance between two object vertices.
    pub fn object_diameter(&self) -> f64 {
        let mut ids: Vec<usize> = self.object_tets().flat_map(|t| self.tets[t]).collect();
        ids.sort_unstable();
        ids.dedup();
        let pts: Vec<Vec3> = ids.iter().map(|&v| self.vertices[v]).collect();
        let mut d: f64 = 0.0;
        for (n, a) in pts.iter().enumerate() {
            for b in &pts[n + 1..] {
                d = d.max(norm(&sub(a, b)));
            }
        }
        d
    }

    /// Largest edge length among object tets.
    pub fn object_mesh_size(&self) -> f64 {
        self.object_tets()
            .flat_map(|t| self.tet_edges[t])
            .map(|e| norm(&sub(&self.vertices[self.edges[e][0]], &self.vertices[self.edges[e][1]])))
            .fold(0.0, f64::max)
    }

    pub fn apply_orthogonal(&self, q: &Mat3) -> Result<TetMesh, MeshError> {
        let defect = linalg::orthogonality_defect(q);
        if !(defect <= ORTHOGONALITY_TOL) {
            return Err(MeshError::NonOrthogonal(defect));
        }
        let vertices = self.vertices.iter().map(|v| linalg::mat_vec(q, v)).collect();
        let tets = if linalg::det(q) < 0.0 {
            self.tets.iter().map(|t| [t[1], t[0], t[2], t[3]]).collect()
        } else {
            self.tets.clone()
        };
        TetMesh::new(vertices, tets, self.regions.clone(), self.faces.clone())
    }

    /// Applies ξ ↦ s(ξ + shift).
    pub fn translated_scaled(&self, shift: &Vec3, s: f64) -> Result<TetMesh, MeshError> {
        let vertices =
            self.vertices.iter().map(|v| linalg::scale(&linalg::add(v, shift), s)).collect();
        TetMesh::new(vertices, self.tets.clone(), self.regions.clone(), self.faces.clone())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("GMPTMESH 1\n");
        let _ = writeln!(out, "VERTICES {}", self.vertices.len());
        for v in &self.vertices {
            let _ = writeln!(out, "{} {} {}", v[0], v[1], v[2]);
        }
        let _ = writeln!(out, "TETS {}", self.tets.len());
        for (t, r) in self.tets.iter().zip(&self.regions) {
            let _ = writeln!(out, "{} {} {} {} {}", t[0], t[1], t[2], t[3], r.tag());
        }
        let _ = writeln!(out, "TRIFACES {}", self.faces.len());
        for (f, tag) in &self.faces {
            let _ = writeln!(out, "{} {} {} {}", f[0], f[1], f[2], tag.name());
        }
        out
    }

    pub fn parse(text: &str) -> Result<TetMesh, MeshError> {
        let mut cur = Cursor::new(text);
        let (n, header) = cur.next_line()?;
        if header.split_whitespace().collect::<Vec<_>>() != ["GMPTMESH", "1"] {
            return Err(parse_err(n, format!("expected header \"GMPTMESH 1\", found \"{header}\"")));
        }
        let nv = cur.section("VERTICES")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (n, p) = cur.fields(3)?;
            let mut v = [0.0; 3];
            for i in 0..3 {
                v[i] = p[i]
                    .parse()
                    .map_err(|_| parse_err(n, format!("bad coordinate \"{}\"", p[i])))?;
            }
            vertices.push(v);
        }
        let nt = cur.section("TETS")?;
        let mut tets = Vec::with_capacity(nt);
        let mut regions = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (n, p) = cur.fields(5)?;
            tets.push([id(n, p[0])?, id(n, p[1])?, id(n, p[2])?, id(n, p[3])?]);
            regions.push(match p[4] {
                "0" => Region::Exterior,
                "1" => Region::Object,
                other => return Err(parse_err(n, format!("unknown region tag \"{other}\""))),
            });
        }
        let nf = cur.section("TRIFACES")?;
        let mut faces = Vec::with_capacity(nf);
        for _ in 0..nf {
            let (n, p) = cur.fields(4)?;
            let tag = match p[3] {
                "GAMMA" => FaceTag::Gamma,
                "FAR" => FaceTag::Far,
                other => return Err(parse_err(n, format!("unknown face tag \"{other}\""))),
            };
            faces.push(([id(n, p[0])?, id(n, p[1])?, id(n, p[2])?], tag));
        }
        if let Some((n, l)) = cur.lines.next() {
            return Err(parse_err(n, format!("trailing content \"{l}\"")));
        }
        TetMesh::new(vertices, tets, regions, faces)
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

fn parse_err(line: usize, message: String) -> MeshError {
    MeshError::Parse { line, message }
}

fn id(line: usize, s: &str) -> Result<usize, MeshError> {
    s.parse().map_err(|_| parse_err(line, format!("bad vertex id \"{s}\"")))
}

struct Cursor<'a> {
    lines: Box<dyn Iterator<Item = (usize, &'a str)> + 'a>,
    last: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        Cursor { lines: Box::new(lines), last: 0 }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str), MeshError> {
        match self.lines.next() {
            Some((n, l)) => {
                self.last = n;
                Ok((n, l))
            }
            None => Err(parse_err(self.last + 1, "unexpected end of file".into())),
        }
    }

    fn section(&mut self, name: &str) -> Result<usize, MeshError> {
        let (n, l) = self.next_line()?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != 2 || parts[0] != name {
            return Err(parse_err(n, format!("expected \"{name} <count>\", found \"{l}\"")));
        }
        parts[1].parse().map_err(|_| parse_err(n, format!("bad count \"{}\"", parts[1])))
    }

    fn fields(&mut self, width: usize) -> Result<(usize, Vec<&'a str>), MeshError> {
        let (n, l) = self.next_line()?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != width {
            return Err(parse_err(n, format!("expected {width} fields, found {}", parts.len())));
        }
        Ok((n, parts))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_mesh(path: &Path) -> Result<TetMesh, MeshError> {
    TetMesh::parse(&std::fs::read_to_string(path)?)
}

pub fn write_mesh(mesh: &TetMesh, path: &Path) -> Result<(), MeshError> {
    std::fs::write(path, mesh.to_text())?;
    Ok(())
}

/// Object placement and material data.
#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub mesh: Arc<TetMesh>,
    pub alpha: f64,
    pub z: Vec3,
    pub sigma_star: f64,
    pub mu_star: f64,
    pub mu0: f64,
    pub omega: f64,
}

impl ObjectSpec {
    pub fn new(
        mesh: Arc<TetMesh>,
        alpha: f64,
        z: Vec3,
        sigma_star: f64,
        mu_r: f64,
        omega: f64,
    ) -> Result<Self, MeshError> {
        let spec = ObjectSpec { mesh, alpha, z, sigma_star, mu_star: mu_r * MU0, mu0: MU0, omega };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let bad = |m: &str| Err(MeshError::InvalidSpec(m.into()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.sigma_star >= 0.0 && self.sigma_star.is_finite()) {
            return bad("conductivity must be non-negative");
        }
        if !(self.mu0 > 0.0 && self.mu_star > 0.0 && self.mu_star.is_finite()) {
            return bad("permeabilities must be positive");
        }
        if !self.omega.is_finite() || self.z.iter().any(|c| !c.is_finite()) {
            return bad("frequency and position must be finite");
        }
        if !self.nu().is_finite() {
            return bad("nu is not finite");
        }
        Ok(())
    }

    /// ν = ω μ₀ σ* α².
    pub fn nu(&self) -> f64 {
        self.omega * self.mu0 * self.sigma_star * self.alpha * self.alpha
    }

    pub fn mu_r(&self) -> f64 {
        self.mu_star / self.mu0
    }

    /// Same object with α replaced and σ* adjusted so that ν is unchanged.
    pub fn with_alpha_fixed_nu(&self, alpha: f64) -> ObjectSpec {
        let mut s = self.clone();
        s.sigma_star = self.sigma_star * (self.alpha / alpha).powi(2);
        s.alpha = alpha;
        s
    }
}

/// Translation and scale applied by [`canonicalize`]: ξ' = scale·(ξ + translation).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CanonicalTransform {
    pub translation: Vec3,
    pub scale: f64,
}

/// Moves the object centroid to the ξ-origin and rescales B so that the supplied
/// Pólya–Szegő tensor (of the current B) would have unit |determinant| (T(0) is
/// negative definite); α and z are adjusted so the physical object z + αB is unchanged.
pub fn canonicalize(
    spec: &ObjectSpec,
    polya_szego: &Mat3,
) -> Result<(ObjectSpec, CanonicalTransform), MeshError> {
    let d = linalg::det(polya_szego);
    if d == 0.0 || !d.is_finite() {
        return Err(MeshError::DegenerateTensor(d));
    }
    let c = spec.mesh.object_centroid();
    let translation = linalg::scale(&c, -1.0);
    let scale = d.abs().powf(-1.0 / 9.0);
    let mesh = spec.mesh.translated_scaled(&translation, scale)?;
    let mut out = spec.clone();
    out.mesh = Arc::new(mesh);
    out.z = linalg::add(&spec.z, &linalg::scale(&c, spec.alpha));
    out.alpha = spec.alpha / scale;
    Ok((out, CanonicalTransform { translation, scale }))
}
