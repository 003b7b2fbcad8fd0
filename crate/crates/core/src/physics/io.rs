//! Trajectory CSV: optional `# key=value` comment lines, a header, then one
//! row per state with columns `t,x,y,z,qw,qx,qy,qz,vx,vy,vz,wx,wy,wz`.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{PhysicsError, Result, RobotState, Trajectory};

pub const TRAJECTORY_HEADER: &str = "t,x,y,z,qw,qx,qy,qz,vx,vy,vz,wx,wy,wz";

pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut w: W) -> Result<()> {
    writeln!(w, "# dt={}", traj.dt)?;
    if let Some(t) = traj.truncated_at {
        writeln!(w, "# truncated_at={t}")?;
    }
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for (i, s) in traj.states.iter().enumerate() {
        let q = s.quaternion();
        let row = [
            i as f64 * traj.dt,
            s.x.x,
            s.x.y,
            s.x.z,
            q.w,
            q.i,
            q.j,
            q.k,
            s.v.x,
            s.v.y,
            s.v.z,
            s.omega.x,
            s.omega.y,
            s.omega.z,
        ];
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_trajectory_csv<R: Read>(r: R) -> Result<Trajectory> {
    let mut dt = None;
    let mut truncated_at = None;
    let mut header_seen = false;
    let mut states = Vec::new();
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.trim().split_once('=') {
                let bad = |_| PhysicsError::Format(format!("line {}: bad value for {k}", lineno + 1));
                match k.trim() {
                    "dt" => dt = Some(v.trim().parse::<f64>().map_err(bad)?),
                    "truncated_at" => {
                        truncated_at = Some(
                            v.trim()
                                .parse::<usize>()
                                .map_err(|_| PhysicsError::Format(format!("line {}: bad truncated_at", lineno + 1)))?,
                        )
                    }
                    _ => {}
                }
            }
            continue;
        }
        if !header_seen {
            if line.replace(' ', "") != TRAJECTORY_HEADER {
                return Err(PhysicsError::Format(format!("line {}: expected header {TRAJECTORY_HEADER}", lineno + 1)));
            }
            header_seen = true;
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| PhysicsError::Format(format!("line {}: {e}", lineno + 1)))?;
        if v.len() != 14 {
            return Err(PhysicsError::Format(format!("line {}: expected 14 columns, got {}", lineno + 1, v.len())));
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(v[4], v[5], v[6], v[7]));
        states.push(RobotState {
            x: Vector3::new(v[1], v[2], v[3]),
            r: q.to_rotation_matrix().into_inner(),
            v: Vector3::new(v[8], v[9], v[10]),
            omega: Vector3::new(v[11], v[12], v[13]),
        });
    }
    if states.is_empty() {
        return Err(PhysicsError::Format("trajectory has no states".into()));
    }
    Ok(Trajectory {
        dt: dt.unwrap_or(0.0),
        states,
        truncated_at,
    })
}
